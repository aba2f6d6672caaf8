//! Patch merging (2x2 space-to-depth + linear) and patch expanding
//! (linear + 2x2 depth-to-space). Channel order inside a merged patch is
//! `(dy, dx, c)`, row-major.

use candle_core::Tensor;

use crate::error::Result;
use crate::layers::Linear;
use crate::params::{Init, Scope};

/// Fan-in scaled uniform init; patch layers carry the signal between stages
/// without a norm, so the small block init would shrink it at every stage.
fn fan_in_init(fan_in: usize) -> Init {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform(-bound, bound)
}

pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub(crate) proj: Linear,
}

impl PatchMerge {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_init(&mut s.pp("proj"), 4 * in_dim, out_dim, true, fan_in_init(4 * in_dim))?,
        })
    }

    /// Replication padding applied to an `h x w` input before merging.
    pub fn padding(h: usize, w: usize) -> (usize, usize) {
        (h % 2, w % 2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let (ph, pw) = Self::padding(h, w);
        let x = x.pad_with_same(1, 0, ph)?.pad_with_same(2, 0, pw)?;
        self.proj.forward(&space_to_depth(&x)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let tokens = (h.div_ceil(2) * w.div_ceil(2)) as u64;
        2 * tokens * (self.proj.in_dim() * self.proj.out_dim()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub(crate) proj: Linear,
}

impl PatchExpand {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_init(&mut s.pp("proj"), in_dim, 4 * out_dim, true, fan_in_init(in_dim))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depth_to_space(&self.proj.forward(x)?)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (h * w) as u64 * (self.proj.in_dim() * self.proj.out_dim()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::transforms::swin::tests::random_map;
    use candle_core::{DType, Device};

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn set_linear(store: &ParamStore, prefix: &str, w: Vec<f64>, rows: usize, cols: usize) {
        let t = Tensor::from_vec(w, (rows, cols), &Device::Cpu).unwrap();
        store.set(&format!("{prefix}.proj.weight"), &t).unwrap();
        store
            .set(
                &format!("{prefix}.proj.bias"),
                &Tensor::zeros(rows, DType::F64, &Device::Cpu).unwrap(),
            )
            .unwrap();
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn merge_and_expand_shapes() {
        let mut store = ParamStore::new(0, DType::F64);
        let m = PatchMerge::new(&mut store.root().pp("m"), 3, 48).unwrap();
        let e = PatchExpand::new(&mut store.root().pp("e"), 48, 12).unwrap();
        let y = m.forward(&random_map((1, 16, 16, 3), 0)).unwrap();
        assert_eq!(y.dims(), &[1, 8, 8, 48]);
        assert_eq!(e.forward(&y).unwrap().dims(), &[1, 16, 16, 12]);
    }

    #[test]
    fn odd_edges_are_replication_padded() {
        let mut store = ParamStore::new(0, DType::F64);
        let m = PatchMerge::new(&mut store.root().pp("m"), 2, 4).unwrap();
        assert_eq!(PatchMerge::padding(5, 4), (1, 0));
        assert_eq!(m.forward(&random_map((1, 5, 4, 2), 0)).unwrap().dims(), &[1, 3, 2, 4]);
    }

    #[test]
    fn identity_merge_of_constant_map() {
        let mut store = ParamStore::new(0, DType::F64);
        let m = PatchMerge::new(&mut store.root().pp("m"), 1, 4).unwrap();
        set_linear(&store, "m", identity(4), 4, 4);
        let x = Tensor::full(0.75f64, (1, 2, 2, 1), &Device::Cpu).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 4]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.75; 4]);
    }

    #[test]
    fn expand_with_identity_rearranges_channels() {
        let mut store = ParamStore::new(0, DType::F64);
        let e = PatchExpand::new(&mut store.root().pp("e"), 4, 1).unwrap();
        set_linear(&store, "e", identity(4), 4, 4);
        let x = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 1, 4))
            .unwrap();
        let y = e.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 1]);
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn merge_matches_reshape_matmul_oracle() {
        let mut store = ParamStore::new(4, DType::F64);
        let m = PatchMerge::new(&mut store.root().pp("m"), 2, 5).unwrap();
        let x = random_map((1, 4, 4, 2), 11);
        let y = m.forward(&x).unwrap().to_dtype(DType::F64).unwrap();

        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = m.proj.weight.to_vec2::<f64>().unwrap();
        let bv = m.proj.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let at = |i: usize, j: usize, c: usize| xv[(i * 4 + j) * 2 + c];
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for oi in 0..2 {
            for oj in 0..2 {
                let mut patch = Vec::new();
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..2 {
                            patch.push(at(2 * oi + dy, 2 * oj + dx, c));
                        }
                    }
                }
                for o in 0..5 {
                    let expected: f64 = bv[o] + wv[o].iter().zip(&patch).map(|(w, p)| w * p).sum::<f64>();
                    let got = yv[(oi * 2 + oj) * 5 + o];
                    assert!((got - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn expand_inverts_merge_with_inverse_projections() {
        // Merge projects 4C -> 4C with a random invertible matrix; expand uses
        // its numerically computed inverse.
        let n = 8;
        let mut store = ParamStore::new(0, DType::F64);
        let m = PatchMerge::new(&mut store.root().pp("m"), 2, n).unwrap();
        let e = PatchExpand::new(&mut store.root().pp("e"), n, 2).unwrap();
        let a: Vec<f64> = (0..n * n)
            .map(|i| {
                if i / n == i % n {
                    2.0
                } else {
                    ((i * 37 % 11) as f64 - 5.0) / 20.0
                }
            })
            .collect();
        let inv = invert(&a, n);
        set_linear(&store, "m", a, n, n);
        set_linear(&store, "e", inv, n, n);
        let x = random_map((1, 4, 6, 2), 3);
        let back = e.forward(&m.forward(&x).unwrap()).unwrap();
        assert!(max_abs(back.sub(&x).unwrap()) < 1e-10);
    }

    fn invert(a: &[f64], n: usize) -> Vec<f64> {
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = a[r * n..(r + 1) * n].to_vec();
                row.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let p = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, p);
            let d = m[col][col];
            m[col].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot = m[col].clone();
                    m[r].iter_mut().zip(pivot).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        m.into_iter().flat_map(|row| row[n..].to_vec()).collect()
    }
}
