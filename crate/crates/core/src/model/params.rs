//! Parameter tree, generic over the payload so the same structure holds
//! tensors, tape handles, gradients or optimizer moments.

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

/// θ, φ, g embeddings (`[C', C, 1, 1]`, no bias) and the 1×1 conv back to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocal<P> {
    pub theta: P,
    pub phi: P,
    pub g: P,
    pub restore: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nedb<P> {
    pub nonlocal: Option<NonLocal<P>>,
    pub layers: Vec<Conv<P>>,
    pub fusion: Conv<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub entry0: Conv<P>,
    pub entry1: Conv<P>,
    pub blocks: Vec<Nedb<P>>,
    pub exit_mid: Conv<P>,
    pub exit_out: Conv<P>,
}

impl<P> Conv<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> Nedb<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Nedb<Q> {
        let nonlocal = self.nonlocal.as_ref().map(|nl| NonLocal {
            theta: f(&format!("{prefix}.nonlocal.theta"), &nl.theta),
            phi: f(&format!("{prefix}.nonlocal.phi"), &nl.phi),
            g: f(&format!("{prefix}.nonlocal.g"), &nl.g),
            restore: nl.restore.map(&format!("{prefix}.nonlocal.restore"), f),
        });
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, c)| c.map(&format!("{prefix}.dense.{i}"), f))
            .collect();
        Nedb {
            nonlocal,
            layers,
            fusion: self.fusion.map(&format!("{prefix}.fusion"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        if let Some(nl) = &mut self.nonlocal {
            f(&format!("{prefix}.nonlocal.theta"), &mut nl.theta);
            f(&format!("{prefix}.nonlocal.phi"), &mut nl.phi);
            f(&format!("{prefix}.nonlocal.g"), &mut nl.g);
            nl.restore
                .visit_mut(&format!("{prefix}.nonlocal.restore"), f);
        }
        for (i, c) in self.layers.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.dense.{i}"), f);
        }
        self.fusion.visit_mut(&format!("{prefix}.fusion"), f);
    }
}

impl<P> Params<P> {
    /// Builds a parallel tree, visiting entries in canonical order.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> Params<Q> {
        let f = &mut f;
        Params {
            entry0: self.entry0.map("entry0", f),
            entry1: self.entry1.map("entry1", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            exit_mid: self.exit_mid.map("exit_mid", f),
            exit_out: self.exit_out.map("exit_out", f),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        self.map(|name, p| f(name, p));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        self.entry0.visit_mut("entry0", f);
        self.entry1.visit_mut("entry1", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.exit_mid.visit_mut("exit_mid", f);
        self.exit_out.visit_mut("exit_out", f);
    }

    /// Entries in canonical order.
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(|name, p| out.push((name.to_string(), p)));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
