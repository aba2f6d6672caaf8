//! Resize-parameter network: three strided ResBlock stages, global average
//! pooling and a scalar head squashed into `[m_min, 1]`.

use candle_core::Tensor;

use crate::config::ScaleConfig;
use crate::error::{Error, Result};
use crate::layers::{sigmoid, to_nchw, Conv2d, Linear};
use crate::params::Scope;

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(s: &mut Scope, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), ch, ch, 3, 1, 1)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + h)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    res: ResBlock,
}

#[derive(Debug, Clone)]
pub struct ResizeNet {
    stages: Vec<Stage>,
    head: Linear,
    widths: [usize; 3],
    m_min: f64,
}

impl ResizeNet {
    pub fn new(s: &mut Scope, cfg: &ScaleConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.rpn_widths.iter().enumerate() {
            let mut si = s.pp(format!("stage{i}"));
            stages.push(Stage {
                down: Conv2d::new(&mut si.pp("down"), c_in, c, 3, 2, 1)?,
                res: ResBlock::new(&mut si.pp("res"), c)?,
            });
            c_in = c;
        }
        let head = Linear::new(&mut s.pp("head"), c_in, 1, true)?;
        Ok(Self {
            stages,
            head,
            widths: cfg.rpn_widths,
            m_min: cfg.m_min,
        })
    }

    /// Per-image resize factors, shape `(B,)`, differentiable.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if b == 0 || h == 0 || w == 0 || c != 3 {
            return Err(Error::Precondition(format!(
                "resize net needs a nonempty 3-channel image, got {:?}",
                x.dims()
            )));
        }
        let mut f = to_nchw(x)?;
        for st in &self.stages {
            f = st.res.forward(&st.down.forward(&f)?.relu()?)?;
        }
        let pooled = f.mean((2, 3))?;
        let logit = self.head.forward(&pooled)?.reshape(b)?;
        Ok((sigmoid(&logit)? * (1.0 - self.m_min))?.affine(1.0, self.m_min)?)
    }

    pub fn flops(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0u64;
        let mut c_in = 3usize;
        for &c in &self.widths {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            let px = (h * w) as u64;
            total += 2 * px * (9 * c_in * c) as u64 + 2 * 2 * px * (9 * c * c) as u64;
            c_in = c;
        }
        total + 2 * c_in as u64
    }
}
