//! Parameterised building blocks recorded onto a tape.

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DropoutCtx, Group};
use crate::error::Result;

/// Registers freshly initialised parameters under a name prefix.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            for x in t.data_mut() {
                *x = dist.sample(self.rng);
            }
        }
        t
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = self.normal(shape, std);
        self.store.add(name, t)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(shape, value))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_std(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn linear_std(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        Linear {
            w: self.tensor(&format!("{name}.w"), &[fan_in, fan_out], std),
            b: self.filled(&format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.filled(&format!("{name}.g"), &[d], 1.0),
            bias: self.filled(&format!("{name}.b"), &[d], 0.0),
        }
    }

    pub fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    pub fn ffn(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d_in, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d_out),
        }
    }

    pub fn self_block(&mut self, name: &str, d: usize, hidden: usize) -> SelfBlock {
        SelfBlock {
            attn: self.attention(&format!("{name}.attn"), d),
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden, d),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
        }
    }

    pub fn cross_block(&mut self, name: &str, d: usize) -> CrossBlock {
        CrossBlock {
            attn: self.attention(&format!("{name}.attn"), d),
            ln: self.layer_norm(&format!("{name}.ln"), d),
        }
    }
}

/// Forward-pass context: the tape being recorded, the parameters, and dropout state.
pub(crate) struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub drop: &'a mut DropoutCtx,
    pub heads: usize,
}

impl Fwd<'_> {
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        Ok(self.tape.param(self.store, id)?)
    }

    pub fn dropout(&mut self, x: Var, group: Group) -> Result<Var> {
        let on = self.drop.is_active(group);
        let rate = self.drop.rate;
        Ok(self.tape.dropout(x, rate, &mut self.drop.rng, on)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(self.w)?;
        let b = f.p(self.b)?;
        Ok(f.tape.linear(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let g = f.p(self.gain)?;
        let b = f.p(self.bias)?;
        Ok(f.tape.layer_norm(x, g, b)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    /// Queries from `x`, keys and values from `ctx`.
    pub fn fwd(&self, f: &mut Fwd, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.fwd(f, x)?;
        let k = self.k.fwd(f, ctx)?;
        let v = self.v.fwd(f, ctx)?;
        let heads = f.heads;
        let a = f.tape.attention(q, k, v, heads)?;
        self.o.fwd(f, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn fwd(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.up.fwd(f, x)?;
        let h = f.tape.gelu(h)?;
        self.down.fwd(f, h)
    }
}

/// Post-norm transformer layer: self-attention then feed-forward, each with a residual.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SelfBlock {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: Ffn,
    pub ln2: LayerNorm,
}

impl SelfBlock {
    pub fn fwd(&self, f: &mut Fwd, x: Var, group: Group) -> Result<Var> {
        let a = self.attn.fwd(f, x, x)?;
        let a = f.dropout(a, group)?;
        let h = f.tape.add(x, a)?;
        let h = self.ln1.fwd(f, h)?;
        let m = self.ffn.fwd(f, h)?;
        let m = f.dropout(m, group)?;
        let y = f.tape.add(h, m)?;
        self.ln2.fwd(f, y)
    }
}

/// Residual cross-attention from `x` into `ctx`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CrossBlock {
    pub attn: Attention,
    pub ln: LayerNorm,
}

impl CrossBlock {
    pub fn fwd(&self, f: &mut Fwd, x: Var, ctx: Var, group: Group) -> Result<Var> {
        let a = self.attn.fwd(f, x, ctx)?;
        let a = f.dropout(a, group)?;
        let h = f.tape.add(x, a)?;
        self.ln.fwd(f, h)
    }
}
