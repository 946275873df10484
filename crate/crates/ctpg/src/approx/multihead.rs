use super::{adam_step, AdamState, Cache, ParamBlock, Shape};
use crate::error::Result;

/// Observation handed to an approximator: a tabular state index or a flat
/// real vector.
#[derive(Debug, Clone, Copy)]
pub enum Obs<'a> {
    Index(usize),
    Vector(&'a [f64]),
}

/// Per-task heads with an optional shared trunk.
///
/// Tabular heads take an `Obs::Index` and must not have a trunk; network
/// heads take an `Obs::Vector`, routed through the trunk when present.
#[derive(Debug, Clone)]
pub struct MultiHead {
    pub trunk: Option<ParamBlock>,
    pub heads: Vec<ParamBlock>,
}

pub struct MultiHeadCache {
    trunk: Option<Cache>,
    head: Cache,
}

/// Gradient accumulators mirroring a `MultiHead`. Trunk gradients are kept
/// per task so multi-task loss weights can be applied after the batch pass.
pub struct MultiHeadGrads {
    pub trunk: Vec<Vec<f64>>,
    pub heads: Vec<Vec<f64>>,
}

/// Adam states mirroring a `MultiHead`.
#[derive(Debug, Clone)]
pub struct MultiHeadOpt {
    trunk: Option<AdamState>,
    heads: Vec<AdamState>,
}

impl MultiHead {
    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].shape().output_dim()
    }

    pub fn forward(&self, task: usize, obs: Obs) -> Result<Vec<f64>> {
        Ok(self.forward_cached(task, obs)?.0)
    }

    pub fn forward_cached(&self, task: usize, obs: Obs) -> Result<(Vec<f64>, MultiHeadCache)> {
        match obs {
            Obs::Index(row) => {
                debug_assert!(self.trunk.is_none(), "tabular heads take no trunk");
                let (out, head) = self.heads[task].lookup_cached(row);
                Ok((out, MultiHeadCache { trunk: None, head }))
            }
            Obs::Vector(v) => match &self.trunk {
                Some(trunk) => {
                    let (z, tc) = trunk.forward_cached(v)?;
                    // Trunk features pass through a ReLU before the heads.
                    let feat: Vec<f64> = z.iter().map(|&x| x.max(0.0)).collect();
                    let (out, hc) = self.heads[task].forward_cached(&feat)?;
                    Ok((
                        out,
                        MultiHeadCache {
                            trunk: Some(tc),
                            head: hc,
                        },
                    ))
                }
                None => {
                    let (out, hc) = self.heads[task].forward_cached(v)?;
                    Ok((
                        out,
                        MultiHeadCache {
                            trunk: None,
                            head: hc,
                        },
                    ))
                }
            },
        }
    }

    /// Accumulates gradients of `<upstream, forward(task, obs)>` into `grads`.
    pub fn backward(
        &self,
        task: usize,
        cache: &MultiHeadCache,
        upstream: &[f64],
        grads: &mut MultiHeadGrads,
    ) -> Result<()> {
        self.backward_with_input(task, cache, upstream, grads)?;
        Ok(())
    }

    /// Like `backward`, additionally returning the gradient with respect to
    /// the observation vector (empty for tabular observations).
    pub fn backward_with_input(
        &self,
        task: usize,
        cache: &MultiHeadCache,
        upstream: &[f64],
        grads: &mut MultiHeadGrads,
    ) -> Result<Vec<f64>> {
        let head_input_grad =
            self.heads[task].backward(&cache.head, upstream, &mut grads.heads[task])?;
        if let (Some(trunk), Some(tc)) = (&self.trunk, &cache.trunk) {
            // Gate through the trunk-output ReLU.
            let mut gated = head_input_grad;
            // Recover trunk pre-activation sign from the cache: trunk output z
            // was rectified, so gradient passes only where z > 0. The head
            // cache stored the rectified features as its input activations.
            let feats = self.head_input(cache);
            for (g, &f) in gated.iter_mut().zip(feats) {
                if f <= 0.0 {
                    *g = 0.0;
                }
            }
            return trunk.backward(tc, &gated, &mut grads.trunk[task]);
        }
        Ok(head_input_grad)
    }

    fn head_input<'c>(&self, cache: &'c MultiHeadCache) -> &'c [f64] {
        &cache.head.acts[0]
    }

    /// Adam step on all blocks. `task_weights[i]` scales head `i`'s gradient
    /// and its trunk contribution; trunk contributions are summed.
    pub fn apply(
        &mut self,
        grads: &MultiHeadGrads,
        task_weights: &[f64],
        lr: f64,
        opt: &mut MultiHeadOpt,
    ) -> Result<()> {
        for (i, head) in self.heads.iter_mut().enumerate() {
            if task_weights[i] == 0.0 {
                continue;
            }
            let scaled: Vec<f64> = grads.heads[i].iter().map(|g| g * task_weights[i]).collect();
            adam_step(head, &scaled, &mut opt.heads[i], lr)?;
        }
        if let (Some(trunk), Some(state)) = (&mut self.trunk, &mut opt.trunk) {
            let mut total = vec![0.0; trunk.len()];
            for (i, tg) in grads.trunk.iter().enumerate() {
                if task_weights[i] == 0.0 {
                    continue;
                }
                for (t, g) in total.iter_mut().zip(tg) {
                    *t += task_weights[i] * g;
                }
            }
            adam_step(trunk, &total, state, lr)?;
        }
        Ok(())
    }

    pub fn named_blocks(&self, prefix: &str) -> Vec<(String, &ParamBlock)> {
        let mut out = Vec::new();
        if let Some(t) = &self.trunk {
            out.push((format!("{prefix}.trunk"), t));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}"), h));
        }
        out
    }

    pub fn named_blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut ParamBlock)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.trunk {
            out.push((format!("{prefix}.trunk"), t));
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("{prefix}.head{i}"), h));
        }
        out
    }
}

impl MultiHeadGrads {
    pub fn zeros_like(mh: &MultiHead) -> Self {
        let trunk_len = mh.trunk.as_ref().map_or(0, |t| t.len());
        Self {
            trunk: vec![vec![0.0; trunk_len]; mh.heads.len()],
            heads: mh.heads.iter().map(|h| vec![0.0; h.len()]).collect(),
        }
    }
}

impl MultiHeadOpt {
    pub fn new(mh: &MultiHead) -> Self {
        Self {
            trunk: mh.trunk.as_ref().map(|t| AdamState::new(t.len())),
            heads: mh.heads.iter().map(|h| AdamState::new(h.len())).collect(),
        }
    }
}

/// Elementwise Polyak averaging: target <- (1 - tau) * target + tau * src.
pub fn polyak(target: &mut MultiHead, src: &MultiHead, tau: f64) {
    fn blend(t: &mut ParamBlock, s: &ParamBlock, tau: f64) {
        for (tv, sv) in t.values_mut().iter_mut().zip(s.values()) {
            *tv = (1.0 - tau) * *tv + tau * sv;
        }
    }
    if let (Some(t), Some(s)) = (&mut target.trunk, &src.trunk) {
        blend(t, s, tau);
    }
    for (t, s) in target.heads.iter_mut().zip(&src.heads) {
        blend(t, s, tau);
    }
}

/// Builds a multi-head function: tabular per-task tables, or MLP heads with
/// an optional shared trunk.
pub struct MultiHeadSpec {
    pub n_tasks: usize,
    pub shape: HeadShape,
}

pub enum HeadShape {
    Table { rows: usize, cols: usize },
    Net { input_dim: usize, hidden: Vec<usize>, output_dim: usize, shared_trunk: bool },
}

impl MultiHeadSpec {
    pub fn build(&self, rng: &mut impl rand::Rng) -> MultiHead {
        match &self.shape {
            HeadShape::Table { rows, cols } => MultiHead {
                trunk: None,
                heads: (0..self.n_tasks)
                    .map(|_| ParamBlock::zeros(Shape::Table { rows: *rows, cols: *cols }))
                    .collect(),
            },
            HeadShape::Net {
                input_dim,
                hidden,
                output_dim,
                shared_trunk,
            } => {
                if *shared_trunk && !hidden.is_empty() {
                    // Trunk carries all hidden layers; heads are linear.
                    let trunk_spec = super::NetSpec::new(
                        *input_dim,
                        hidden[..hidden.len() - 1].to_vec(),
                        *hidden[hidden.len() - 1..].first().unwrap(),
                    );
                    let head_in = *hidden.last().unwrap();
                    MultiHead {
                        trunk: Some(ParamBlock::init(Shape::Net(trunk_spec), rng)),
                        heads: (0..self.n_tasks)
                            .map(|_| {
                                ParamBlock::init(
                                    Shape::Net(super::NetSpec::new(head_in, vec![], *output_dim)),
                                    rng,
                                )
                            })
                            .collect(),
                    }
                } else {
                    MultiHead {
                        trunk: None,
                        heads: (0..self.n_tasks)
                            .map(|_| {
                                ParamBlock::init(
                                    Shape::Net(super::NetSpec::new(
                                        *input_dim,
                                        hidden.clone(),
                                        *output_dim,
                                    )),
                                    rng,
                                )
                            })
                            .collect(),
                    }
                }
            }
        }
    }
}
