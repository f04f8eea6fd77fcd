//! Non-overlapping k×k tiling of a feature map for region-level non-local
//! enhancement. Regions are ordered row-major over the grid.

use crate::error::{Error, Result};
use crate::tensor::{crop, tile_grid, Element, Graph, Tensor, Var};

fn region_extent(h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::GridDivisibility { h, w, k });
    }
    Ok((h / k, w / k))
}

pub fn region_partition<T: Element>(f: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    let (_, h, w) = f.chw()?;
    let (rh, rw) = region_extent(h, w, k)?;
    (0..k * k)
        .map(|r| crop(f, (r / k) * rh, (r % k) * rw, rh, rw))
        .collect()
}

pub fn region_merge<T: Element>(regions: &[Tensor<T>], k: usize) -> Result<Tensor<T>> {
    let refs: Vec<_> = regions.iter().collect();
    tile_grid(&refs, k)
}

/// Tape version of [`region_partition`]; `k == 1` returns the input unchanged.
pub fn partition_var<T: Element>(graph: &mut Graph<T>, f: Var, k: usize) -> Result<Vec<Var>> {
    let (_, h, w) = graph.value(f).chw()?;
    let (rh, rw) = region_extent(h, w, k)?;
    if k == 1 {
        return Ok(vec![f]);
    }
    (0..k * k)
        .map(|r| graph.crop(f, (r / k) * rh, (r % k) * rw, rh, rw))
        .collect()
}

pub fn merge_var<T: Element>(graph: &mut Graph<T>, regions: &[Var], k: usize) -> Result<Var> {
    if let [single] = regions {
        if k == 1 {
            return Ok(*single);
        }
    }
    graph.tile(regions, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_region_is_input() {
        let f = Tensor::<f32>::from_fn(&[2, 4, 4], |i| i as f32);
        let parts = region_partition(&f, 1).unwrap();
        assert_eq!(parts, vec![f]);
    }

    #[test]
    fn top_left_tile() {
        let f = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let parts = region_partition(&f, 2).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0].data(), &[0., 1., 4., 5.]);
        assert_eq!(parts[3].data(), &[10., 11., 14., 15.]);
    }

    #[test]
    fn divisibility_error_names_extents() {
        let f = Tensor::<f32>::zeros(&[1, 6, 4]);
        let err = region_partition(&f, 4).unwrap_err().to_string();
        assert!(err.contains("6x4") && err.contains("4x4"), "{err}");
    }
}
