//! Hybrid feature fusion: per-image channel self-attention (d×d scores over
//! length-r channel vectors), spatial self-attention (r×r scores over
//! length-d position vectors), and their additive fusion.
//!
//! All graph-level functions take and return the channel view (d×r) unless
//! noted; `sfo` returns the spatial view (r×d).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Order in which channel and spatial optimization are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arrangement {
    #[default]
    Parallel,
    CfoThenSfo,
    SfoThenCfo,
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [Arrangement::CfoThenSfo, Arrangement::SfoThenCfo, Arrangement::Parallel];

    pub fn name(self) -> &'static str {
        match self {
            Arrangement::Parallel => "parallel",
            Arrangement::CfoThenSfo => "cfo_then_sfo",
            Arrangement::SfoThenCfo => "sfo_then_cfo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "parallel" => Some(Arrangement::Parallel),
            "cfo_then_sfo" | "cfo->sfo" => Some(Arrangement::CfoThenSfo),
            "sfo_then_cfo" | "sfo->cfo" => Some(Arrangement::SfoThenCfo),
            _ => None,
        }
    }
}

/// Which feature dimensions participate (shared by fusion and reconstruction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub channel: bool,
    pub spatial: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            channel: true,
            spatial: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureDims {
    pub fn r(&self) -> usize {
        self.h * self.w
    }
}

/// Sinusoidal table laid out as the d×r channel view: channel `c` uses
/// frequency `10000^(-2⌊c/2⌋/d)`, sine on even channels and cosine on odd.
pub fn sinusoidal_position_encoding<T: Scalar>(d: usize, h: usize, w: usize) -> Tensor<T> {
    let r = h * w;
    Tensor::from_fn(vec![d, r], |i| {
        let (c, pos) = (i / r, i % r);
        let freq = 10000f64.powf(-2.0 * (c / 2) as f64 / d as f64);
        let angle = pos as f64 * freq;
        T::from_f64_lossy(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
    .expect("positive extents")
}

/// Square projection with PyTorch-linear style `U(-1/√n, 1/√n)` entries.
pub(crate) fn init_projection<T: Scalar>(n: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bound = 1.0 / (n as f64).sqrt();
    Tensor::from_fn(vec![n, n], |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

pub struct HffpParams<T> {
    pub dims: FeatureDims,
    pub wc_q: ParamId,
    pub wc_k: ParamId,
    pub wc_v: ParamId,
    pub ws_q: ParamId,
    pub ws_k: ParamId,
    pub ws_v: ParamId,
    pub pos_enc: Tensor<T>,
    /// Add the position table before spatial optimization as well.
    pub pos_enc_in_sfo: bool,
}

impl<T: Scalar> HffpParams<T> {
    pub fn new(dims: FeatureDims, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let (d, r) = (dims.d, dims.r());
        Ok(Self {
            dims,
            wc_q: store.add(format!("{prefix}.wc_q"), init_projection(r, rng)?)?,
            wc_k: store.add(format!("{prefix}.wc_k"), init_projection(r, rng)?)?,
            wc_v: store.add(format!("{prefix}.wc_v"), init_projection(r, rng)?)?,
            ws_q: store.add(format!("{prefix}.ws_q"), init_projection(d, rng)?)?,
            ws_k: store.add(format!("{prefix}.ws_k"), init_projection(d, rng)?)?,
            ws_v: store.add(format!("{prefix}.ws_v"), init_projection(d, rng)?)?,
            pos_enc: sinusoidal_position_encoding(d, dims.h, dims.w),
            pos_enc_in_sfo: true,
        })
    }

    pub fn channel_ids(&self) -> [ParamId; 3] {
        [self.wc_q, self.wc_k, self.wc_v]
    }

    pub fn spatial_ids(&self) -> [ParamId; 3] {
        [self.ws_q, self.ws_k, self.ws_v]
    }

    fn check_channel_view(&self, g: &Graph<T>, f: Var) -> Result<()> {
        let want = [self.dims.d, self.dims.r()];
        if g.shape(f) != want {
            return Err(Error::Shape {
                op: "hffp",
                lhs: g.shape(f).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    fn with_pos_enc(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let pe = g.constant(self.pos_enc.clone())?;
        g.add(f, pe)
    }
}

/// `Softmax(Q Kᵀ · scale) V` with the softmax along the last score axis.
pub(crate) fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::from_f64_lossy(scale))?;
    let attn = g.softmax_lastdim(scaled)?;
    g.matmul(attn, v)
}

/// Channel feature optimization on a d×r channel view; returns d×r.
pub fn cfo<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &HffpParams<T>, f: Var) -> Result<Var> {
    p.check_channel_view(g, f)?;
    let x = p.with_pos_enc(g, f)?;
    let (wq, wk, wv) = (g.param(store, p.wc_q)?, g.param(store, p.wc_k)?, g.param(store, p.wc_v)?);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    attend(g, q, k, v, 1.0 / (p.dims.r() as f64).sqrt())
}

/// Spatial feature optimization on a d×r channel view; returns r×d.
pub fn sfo<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &HffpParams<T>, f: Var) -> Result<Var> {
    p.check_channel_view(g, f)?;
    let x = if p.pos_enc_in_sfo { p.with_pos_enc(g, f)? } else { f };
    let xs = g.transpose(x)?;
    let (wq, wk, wv) = (g.param(store, p.ws_q)?, g.param(store, p.ws_k)?, g.param(store, p.ws_v)?);
    let q = g.matmul(xs, wq)?;
    let k = g.matmul(xs, wk)?;
    let v = g.matmul(xs, wv)?;
    attend(g, q, k, v, 1.0 / (p.dims.d as f64).sqrt())
}

/// `g = f_c + f_sᵀ`, both brought to the d×r layout.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, f_c: Var, f_s: Var) -> Result<Var> {
    let (sc, ss) = (g.shape(f_c).to_vec(), g.shape(f_s).to_vec());
    if sc.len() != 2 || ss.len() != 2 || sc[0] != ss[1] || sc[1] != ss[0] {
        return Err(Error::Shape {
            op: "fuse",
            lhs: sc,
            rhs: ss,
        });
    }
    let st = g.transpose(f_s)?;
    g.add(f_c, st)
}

/// Full fusion stage for one image under the given arrangement and branch
/// selection. Input and output are d×r channel views.
pub fn apply_hffp<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HffpParams<T>,
    arrangement: Arrangement,
    branches: Branches,
    f: Var,
) -> Result<Var> {
    match (branches.channel, branches.spatial) {
        (false, false) => Err(Error::Config("fusion needs at least one branch".into())),
        (true, false) => cfo(g, store, p, f),
        (false, true) => {
            let s = sfo(g, store, p, f)?;
            g.transpose(s)
        }
        (true, true) => match arrangement {
            Arrangement::Parallel => {
                let c = cfo(g, store, p, f)?;
                let s = sfo(g, store, p, f)?;
                fuse(g, c, s)
            }
            Arrangement::CfoThenSfo => {
                let c = cfo(g, store, p, f)?;
                let s = sfo(g, store, p, c)?;
                g.transpose(s)
            }
            Arrangement::SfoThenCfo => {
                let s = sfo(g, store, p, f)?;
                let st = g.transpose(s)?;
                cfo(g, store, p, st)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe = sinusoidal_position_encoding::<f64>(6, 2, 3);
        let r = 6;
        for c in 0..6 {
            let v = pe.data()[c * r];
            assert_eq!(v, if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn position_encoding_is_bounded_and_deterministic() {
        let a = sinusoidal_position_encoding::<f32>(64, 5, 5);
        let b = sinusoidal_position_encoding::<f32>(64, 5, 5);
        assert_eq!(a.shape(), &[64, 25]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn arrangement_names_parse_back() {
        for a in Arrangement::ALL {
            assert_eq!(Arrangement::parse(a.name()), Some(a));
        }
    }
}
