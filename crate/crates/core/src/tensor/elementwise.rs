use super::{same_shape, Element, Tensor};
use crate::error::Result;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Uses the forward output; the subgradient at 0 is 0.
pub fn relu_backward<T: Element>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    zip_map(out, grad, |y, g| if y > T::zero() { g } else { T::zero() })
}

pub fn tanh<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

pub fn tanh_backward<T: Element>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    zip_map(out, grad, |y, g| g * (T::one() - y * y))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(zip_map(a, b, |x, y| x + y))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    Ok(zip_map(a, b, |x, y| x * y))
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

/// Mean absolute error `(1/n) Σ |pred − target|` as a one-element tensor.
pub fn mae<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mae", pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(Tensor::scalar(T::from_f64(total / pred.numel() as f64)))
}

/// Gradient of [`mae`] w.r.t. `pred`; negate it for `target`. Zero at exact ties.
pub fn mae_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream / T::from_f64(pred.numel() as f64);
    zip_map(pred, target, |p, t| {
        if p > t {
            scale
        } else if p < t {
            -scale
        } else {
            T::zero()
        }
    })
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_range_and_zero() {
        let x = Tensor::<f32>::new(vec![4], vec![0.0, 50.0, -50.0, 0.3]).unwrap();
        let y = tanh(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 2.5);
        assert_eq!(add(&x, &Tensor::zeros(&[2, 3])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        let g = relu_backward(&y, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mae_values() {
        let y = Tensor::<f64>::from_fn(&[3, 4, 4], |i| (i as f64 * 0.01) % 0.5);
        assert_eq!(mae(&y, &y).unwrap().item(), 0.0);
        let shifted = y.map(|v| v + 0.2);
        assert!((mae(&shifted, &y).unwrap().item() - 0.2).abs() < 1e-12);
        // half the pixels off by 0.4, half exact
        let half = Tensor::from_fn(&[3, 4, 4], |i| {
            y.data()[i] + if i % 2 == 0 { 0.4 } else { 0.0 }
        });
        assert!((mae(&half, &y).unwrap().item() - 0.2).abs() < 1e-12);
        let g = mae_backward(&y, &y, 1.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
