//! Hybrid feature reconstruction: four cross-attention reconstructions
//! between a query's hybrid feature and a class's support features.
//!
//! Channel reconstruction works on d×r channel views with r×r projections;
//! spatial reconstruction works on r×d views (support shots stacked to K·r×d)
//! with d×d projections. Support and query share one projection set per
//! dimension.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hffp::{attend, init_projection, sinusoidal_position_encoding, Branches, FeatureDims};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub struct HfrpParams<T> {
    pub dims: FeatureDims,
    pub ac_q: ParamId,
    pub ac_k: ParamId,
    pub ac_v: ParamId,
    pub as_q: ParamId,
    pub as_k: ParamId,
    pub as_v: ParamId,
    /// When set, added to channel views before projection.
    pub pos_enc: Option<Tensor<T>>,
}

impl<T: Scalar> HfrpParams<T> {
    pub fn new(dims: FeatureDims, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let (d, r) = (dims.d, dims.r());
        Ok(Self {
            dims,
            ac_q: store.add(format!("{prefix}.ac_q"), init_projection(r, rng)?)?,
            ac_k: store.add(format!("{prefix}.ac_k"), init_projection(r, rng)?)?,
            ac_v: store.add(format!("{prefix}.ac_v"), init_projection(r, rng)?)?,
            as_q: store.add(format!("{prefix}.as_q"), init_projection(d, rng)?)?,
            as_k: store.add(format!("{prefix}.as_k"), init_projection(d, rng)?)?,
            as_v: store.add(format!("{prefix}.as_v"), init_projection(d, rng)?)?,
            pos_enc: None,
        })
    }

    pub fn enable_pos_enc(&mut self) {
        let FeatureDims { d, h, w } = self.dims;
        self.pos_enc = Some(sinusoidal_position_encoding(d, h, w));
    }

    pub fn channel_ids(&self) -> [ParamId; 3] {
        [self.ac_q, self.ac_k, self.ac_v]
    }

    pub fn spatial_ids(&self) -> [ParamId; 3] {
        [self.as_q, self.as_k, self.as_v]
    }

    fn channel_scale(&self) -> f64 {
        1.0 / (self.dims.r() as f64).sqrt()
    }

    fn spatial_scale(&self) -> f64 {
        1.0 / (self.dims.d as f64).sqrt()
    }
}

/// Query/key/value projections of one input.
#[derive(Debug, Clone, Copy)]
struct Proj {
    q: Var,
    k: Var,
    v: Var,
}

fn expect_shape<T: Scalar>(g: &Graph<T>, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::Shape {
            op,
            lhs: g.shape(v).to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

fn project<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, ids: [ParamId; 3], x: Var) -> Result<Proj> {
    let (wq, wk, wv) = (g.param(store, ids[0])?, g.param(store, ids[1])?, g.param(store, ids[2])?);
    Ok(Proj {
        q: g.matmul(x, wq)?,
        k: g.matmul(x, wk)?,
        v: g.matmul(x, wv)?,
    })
}

fn project_channel<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &HfrpParams<T>, x: Var) -> Result<Proj> {
    let FeatureDims { d, .. } = p.dims;
    expect_shape(g, x, &[d, p.dims.r()], "channel reconstruction")?;
    let x = match &p.pos_enc {
        Some(pe) => {
            let pe = g.constant(pe.clone())?;
            g.add(x, pe)?
        }
        None => x,
    };
    project(g, store, p.channel_ids(), x)
}

fn cfr_query_proj<T: Scalar>(g: &mut Graph<T>, p: &HfrpParams<T>, query: &Proj, shots: &[Proj]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for s in shots {
        let term = attend(g, query.q, s.k, s.v, p.channel_scale())?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.ok_or_else(|| Error::Data("empty support set".into()))?;
    g.scale(sum, T::one() / T::from_usize(shots.len()).expect("count fits"))
}

fn cfr_support_proj<T: Scalar>(g: &mut Graph<T>, p: &HfrpParams<T>, shots: &[Proj], query: &Proj) -> Result<Var> {
    if shots.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let blocks = shots
        .iter()
        .map(|s| attend(g, s.q, query.k, query.v, p.channel_scale()))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&blocks, 1)
}

/// Channel reconstruction of a query (d×r) from K support shots (each d×r):
/// the per-shot attention outputs averaged over shots. Returns d×r.
pub fn cfr_query<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HfrpParams<T>,
    query: Var,
    shots: &[Var],
) -> Result<Var> {
    if shots.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let qp = project_channel(g, store, p, query)?;
    let sp = shots
        .iter()
        .map(|&s| project_channel(g, store, p, s))
        .collect::<Result<Vec<_>>>()?;
    cfr_query_proj(g, p, &qp, &sp)
}

/// Channel reconstruction of each support shot from the query, concatenated
/// along the position axis. Returns d×K·r.
pub fn cfr_support<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HfrpParams<T>,
    shots: &[Var],
    query: Var,
) -> Result<Var> {
    if shots.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let qp = project_channel(g, store, p, query)?;
    let sp = shots
        .iter()
        .map(|&s| project_channel(g, store, p, s))
        .collect::<Result<Vec<_>>>()?;
    cfr_support_proj(g, p, &sp, &qp)
}

fn check_spatial<T: Scalar>(g: &Graph<T>, p: &HfrpParams<T>, query: Var, stack: Var) -> Result<()> {
    let (d, r) = (p.dims.d, p.dims.r());
    expect_shape(g, query, &[r, d], "spatial reconstruction")?;
    let s = g.shape(stack);
    if s.len() != 2 || s[1] != d || s[0] == 0 || s[0] % r != 0 {
        return Err(Error::Shape {
            op: "spatial reconstruction",
            lhs: s.to_vec(),
            rhs: vec![r, d],
        });
    }
    Ok(())
}

/// Spatial reconstruction of a query (r×d) by attending over the whole
/// stacked support (K·r×d). Returns r×d.
pub fn sfr_query<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HfrpParams<T>,
    query: Var,
    support_stack: Var,
) -> Result<Var> {
    check_spatial(g, p, query, support_stack)?;
    let qp = project(g, store, p.spatial_ids(), query)?;
    let sp = project(g, store, p.spatial_ids(), support_stack)?;
    attend(g, qp.q, sp.k, sp.v, p.spatial_scale())
}

/// Spatial reconstruction of the stacked support (K·r×d) from the query.
/// Returns K·r×d.
pub fn sfr_support<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HfrpParams<T>,
    support_stack: Var,
    query: Var,
) -> Result<Var> {
    check_spatial(g, p, query, support_stack)?;
    let qp = project(g, store, p.spatial_ids(), query)?;
    let sp = project(g, store, p.spatial_ids(), support_stack)?;
    attend(g, sp.q, qp.k, qp.v, p.spatial_scale())
}

/// Elementwise `recon + original`.
pub fn residual_connect<T: Scalar>(g: &mut Graph<T>, recon: Var, original: Var) -> Result<Var> {
    g.add(recon, original)
}

/// A reconstruction after its residual connection, and the projected value
/// it is compared against.
#[derive(Debug, Clone, Copy)]
pub struct Recon {
    pub reconstructed: Var,
    pub target: Var,
}

/// Reconstructions for one (query, class) pair; disabled branches are `None`.
#[derive(Debug, Clone, Copy)]
pub struct ReconBundle {
    /// Query from support, channel view: d×r.
    pub q_hat_c: Option<Recon>,
    /// Query from support, spatial view: r×d.
    pub q_hat_s: Option<Recon>,
    /// Support from query, channel view: d×K·r.
    pub s_hat_c: Option<Recon>,
    /// Support from query, spatial view: K·r×d.
    pub s_hat_s: Option<Recon>,
}

struct ChannelSide {
    original: Var,
    proj: Proj,
}

struct ClassChannel {
    shots: Vec<Proj>,
    original: Var,
    target: Var,
}

struct SpatialSide {
    original: Var,
    proj: Proj,
}

/// Reconstructs every query from every class and vice versa.
///
/// `support[n]` holds the K hybrid features (d×r) of class `n`; `queries`
/// holds the query hybrid features (d×r). Returns `bundles[i][n]`.
/// Projections of each image are computed once and reused across pairs.
pub fn reconstruct_all<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &HfrpParams<T>,
    branches: Branches,
    support: &[Vec<Var>],
    queries: &[Var],
) -> Result<Vec<Vec<ReconBundle>>> {
    if !branches.channel && !branches.spatial {
        return Err(Error::Config("reconstruction enabled with both channel and spatial branches off".into()));
    }
    let shot = support.first().map_or(0, Vec::len);
    if shot == 0 || support.iter().any(|s| s.len() != shot) {
        return Err(Error::Data("every class needs the same non-zero number of support shots".into()));
    }

    let mut class_channel = Vec::new();
    let mut class_spatial = Vec::new();
    for shots in support {
        if branches.channel {
            let proj = shots
                .iter()
                .map(|&s| project_channel(g, store, p, s))
                .collect::<Result<Vec<_>>>()?;
            let original = g.concat(shots, 1)?;
            let values: Vec<Var> = proj.iter().map(|pr| pr.v).collect();
            let target = g.concat(&values, 1)?;
            class_channel.push(ClassChannel {
                shots: proj,
                original,
                target,
            });
        }
        if branches.spatial {
            let views = shots.iter().map(|&s| g.transpose(s)).collect::<Result<Vec<_>>>()?;
            let original = g.concat(&views, 0)?;
            let proj = project(g, store, p.spatial_ids(), original)?;
            class_spatial.push(SpatialSide { original, proj });
        }
    }

    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        let qc = if branches.channel {
            Some(ChannelSide {
                original: q,
                proj: project_channel(g, store, p, q)?,
            })
        } else {
            None
        };
        let qs = if branches.spatial {
            let original = g.transpose(q)?;
            let proj = project(g, store, p.spatial_ids(), original)?;
            Some(SpatialSide { original, proj })
        } else {
            None
        };

        let mut row = Vec::with_capacity(support.len());
        for n in 0..support.len() {
            let mut bundle = ReconBundle {
                q_hat_c: None,
                q_hat_s: None,
                s_hat_c: None,
                s_hat_s: None,
            };
            if let Some(qc) = &qc {
                let cc = &class_channel[n];
                let rq = cfr_query_proj(g, p, &qc.proj, &cc.shots)?;
                bundle.q_hat_c = Some(Recon {
                    reconstructed: residual_connect(g, rq, qc.original)?,
                    target: qc.proj.v,
                });
                let rs = cfr_support_proj(g, p, &cc.shots, &qc.proj)?;
                bundle.s_hat_c = Some(Recon {
                    reconstructed: residual_connect(g, rs, cc.original)?,
                    target: cc.target,
                });
            }
            if let Some(qs) = &qs {
                let cs = &class_spatial[n];
                let rq = attend(g, qs.proj.q, cs.proj.k, cs.proj.v, p.spatial_scale())?;
                bundle.q_hat_s = Some(Recon {
                    reconstructed: residual_connect(g, rq, qs.original)?,
                    target: qs.proj.v,
                });
                let rs = attend(g, cs.proj.q, qs.proj.k, qs.proj.v, p.spatial_scale())?;
                bundle.s_hat_s = Some(Recon {
                    reconstructed: residual_connect(g, rs, cs.original)?,
                    target: cs.proj.v,
                });
            }
            row.push(bundle);
        }
        out.push(row);
    }
    Ok(out)
}
