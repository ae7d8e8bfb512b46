// SPDX-License-Identifier: Apache-2.0

//! Lie-algebra generator bank, group elements `G(t) = exp(Σ t_j A_j)` and
//! the group action on flattened square embeddings.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, NodeId};
use crate::matcore::{self, DenseMatrix};
use crate::rng;

/// `d` generators, each `n×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBank {
    n: usize,
    generators: Vec<DenseMatrix>,
}

impl GeneratorBank {
    pub fn new(generators: Vec<DenseMatrix>) -> Result<Self> {
        if generators.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 generators, got {}",
                generators.len()
            )));
        }
        let n = generators[0].rows();
        if generators.iter().any(|g| g.rows() != n || g.cols() != n) {
            return Err(Error::dim("generators must all be n×n"));
        }
        Ok(Self { n, generators })
    }

    /// Seeded i.i.d. `N(0, scale²)` entries.
    pub fn init(d: usize, n: usize, scale: f64, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(Error::invalid(format!(
                "d = {d}; pairwise diagnostics need d ≥ 2"
            )));
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "generator side n = {n} must be ≥ 2"
            )));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("initialisation scale {scale}")));
        }
        let mut rng = rng::stream(seed, "generators", 0);
        let generators = (0..d)
            .map(|_| {
                let data = (0..n * n)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        scale * v
                    })
                    .collect();
                DenseMatrix::new(n, n, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(generators)
    }

    /// From the `[d, n²]` parameter layout used by the model.
    pub fn from_array(a: &Array) -> Result<Self> {
        let [d, nn] = a.shape() else {
            return Err(Error::dim(format!(
                "generator array of shape {:?}",
                a.shape()
            )));
        };
        let n = square_side(*nn)?;
        let generators = a
            .data()
            .chunks(*nn)
            .take(*d)
            .map(|c| DenseMatrix::new(n, n, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(generators)
    }

    pub fn to_array(&self) -> Array {
        let data = self
            .generators
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect();
        Array::new(vec![self.d(), self.n * self.n], data).expect("consistent bank")
    }

    pub fn d(&self) -> usize {
        self.generators.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn generator(&self, j: usize) -> &DenseMatrix {
        &self.generators[j]
    }

    pub fn generators(&self) -> &[DenseMatrix] {
        &self.generators
    }

    /// `A(t) = Σ_j t_j A_j`.
    pub fn assemble_algebra(&self, t: &[f64]) -> Result<DenseMatrix> {
        if t.len() != self.d() {
            return Err(Error::dim(format!(
                "t has length {}, bank has d = {}",
                t.len(),
                self.d()
            )));
        }
        let mut acc = DenseMatrix::zeros(self.n, self.n);
        for (tj, a) in t.iter().zip(&self.generators) {
            if *tj != 0.0 {
                acc = &acc + &a.scale(*tj);
            }
        }
        Ok(acc)
    }

    /// `G(t) = exp(A(t))`.
    pub fn group_element(&self, t: &[f64]) -> Result<DenseMatrix> {
        matcore::mat_exp(&self.assemble_algebra(t)?)
    }

    /// `exp(t·A_j)` for a single generator.
    pub fn one_parameter(&self, j: usize, t: f64) -> Result<DenseMatrix> {
        matcore::mat_exp(&self.generators[j].scale(t))
    }
}

/// Group action on an embedding. A length-`n²` embedding is read as an
/// `n×n` matrix, multiplied on the left by `g` and flattened again; a
/// length-`n` vector gets the plain column action.
pub fn act(g: &DenseMatrix, e: &[f64]) -> Result<Vec<f64>> {
    let n = g.rows();
    if !g.is_square() {
        return Err(Error::dim("group element must be square"));
    }
    if e.len() == n * n {
        Ok(g.matmul(&mat(e)?)?.into_data())
    } else if e.len() == n {
        Ok(g.matmul(&DenseMatrix::new(n, 1, e.to_vec())?)?.into_data())
    } else {
        Err(Error::dim(format!(
            "cannot act with {n}×{n} on length {}",
            e.len()
        )))
    }
}

/// Row-major flatten.
pub fn vec(g: &DenseMatrix) -> Vec<f64> {
    g.data().to_vec()
}

/// Row-major unflatten of a perfect-square-length vector.
pub fn mat(v: &[f64]) -> Result<DenseMatrix> {
    let n = square_side(v.len())?;
    DenseMatrix::new(n, n, v.to_vec())
}

pub fn square_side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len {
        return Err(Error::invalid(format!(
            "length {len} is not a perfect square"
        )));
    }
    Ok(n)
}

/// Batched `A(t)` on the tape: `t [b,d] · gens [d,n²]` reshaped to `[b,n,n]`.
pub fn algebra_on_graph(g: &mut Graph, t: NodeId, gens: NodeId, n: usize) -> Result<NodeId> {
    let flat = g.matmul(t, gens)?;
    let b = g.value(flat).shape()[0];
    g.reshape(flat, &[b, n, n])
}

/// Batched `G(t)` on the tape.
pub fn group_on_graph(g: &mut Graph, t: NodeId, gens: NodeId, n: usize) -> Result<NodeId> {
    let a = algebra_on_graph(g, t, gens, n)?;
    g.mat_exp(a)
}
