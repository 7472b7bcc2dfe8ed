//! Named parameter storage with text serialization.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};

/// Flat parameter table with stable, insertion-ordered names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    order: Vec<String>,
    params: HashMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        if !self.params.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.order.retain(|n| !n.starts_with(prefix));
        self.params.retain(|n, _| !n.starts_with(prefix));
    }

    /// Merge another store into this one, overwriting shared names.
    pub fn absorb(&mut self, other: ParamStore) {
        for name in other.order {
            let v = other.params[&name].clone();
            self.insert(name, v);
        }
    }

    /// Registers every parameter as a tape leaf and returns the bindings.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let mut vars = HashMap::new();
        for name in &self.order {
            vars.insert(name.clone(), tape.leaf(self.params[name].clone()));
        }
        ParamBinding { vars }
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for name in &self.order {
            let a = &self.params[name];
            out.push_str(&format!("param {} {} {}\n", name, a.nrows(), a.ncols()));
            for row in a.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut lines = text.lines();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(Error::config("params", format!("bad header `{header}`")));
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| Error::config("params", "bad row count"))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| Error::config("params", "bad col count"))?;
            let mut a = Array2::zeros((rows, cols));
            for r in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::config("params", format!("{name}: truncated")))?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(Error::config(
                        "params",
                        format!("{name}: row {r} has {} values, expected {cols}", vals.len()),
                    ));
                }
                for (c, v) in vals.iter().enumerate() {
                    a[[r, c]] = v
                        .parse()
                        .map_err(|_| Error::config("params", format!("{name}: bad value")))?;
                }
            }
            store.insert(name, a);
        }
        Ok(store)
    }

    /// Checks that `other` has exactly the same names and shapes; the error
    /// lists every differing parameter by name.
    pub fn shape_diff(&self, other: &ParamStore) -> Result<()> {
        let mut diffs = Vec::new();
        for name in &self.order {
            match other.params.get(name) {
                None => diffs.push(format!("missing `{name}`")),
                Some(a) if a.dim() != self.params[name].dim() => diffs.push(format!(
                    "`{name}`: {:?} vs {:?}",
                    self.params[name].dim(),
                    a.dim()
                )),
                _ => {}
            }
        }
        for name in &other.order {
            if !self.params.contains_key(name) {
                diffs.push(format!("unexpected `{name}`"));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::config("params", diffs.join("; ")))
        }
    }
}

/// Tape vars for one forward pass, keyed by parameter name.
pub struct ParamBinding {
    vars: HashMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    /// Collects leaf gradients back into a name-keyed map. Parameters the
    /// loss does not touch get a zero gradient.
    pub fn collect_grads(
        &self,
        store: &ParamStore,
        grads: &[Option<Array2<f64>>],
    ) -> HashMap<String, Array2<f64>> {
        let mut out = HashMap::new();
        for (name, var) in &self.vars {
            let g = grads[var.0]
                .clone()
                .unwrap_or_else(|| Array2::zeros(store.get(name).dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, std).expect("std > 0");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn serialize_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("a.w", xavier(&mut rng, 3, 4));
        store.insert("b.bias", normal_init(&mut rng, 1, 4, 0.02));
        let back = ParamStore::deserialize(&store.serialize()).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn shape_diff_names_offenders() {
        let mut a = ParamStore::new();
        a.insert("x", Array2::zeros((2, 2)));
        a.insert("y", Array2::zeros((1, 3)));
        let mut b = ParamStore::new();
        b.insert("x", Array2::zeros((2, 3)));
        b.insert("z", Array2::zeros((1, 1)));
        let err = a.shape_diff(&b).unwrap_err().to_string();
        assert!(err.contains("`x`"));
        assert!(err.contains("missing `y`"));
        assert!(err.contains("unexpected `z`"));
    }
}
