//! Forward pass with cached activations and the matching hand-written
//! backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{
    axpy, cross_entropy_loss, dot, leaky_relu, leaky_relu_grad, matvec_add, matvec_t_add,
    outer_add, sigmoid, softmax_in_place, ParamStore, SeededRng, Tensor,
};

use super::{Baseline, Modality, ModelConfig};

pub(crate) const GATES: [&str; 3] = ["z", "r", "h"];

pub(crate) fn gru_names(prefix: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(9);
    for g in GATES {
        out.push(format!("{prefix}.W{g}"));
        out.push(format!("{prefix}.U{g}"));
        out.push(format!("{prefix}.b{g}"));
    }
    out
}

fn slice<'a>(store: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    Ok(store.get(name)?.data())
}

/// GRU cell weights, gate order update, reset, candidate.
pub(crate) struct Gru<'a> {
    w: [&'a [f64]; 3],
    u: [&'a [f64]; 3],
    b: [&'a [f64]; 3],
    input: usize,
    hidden: usize,
}

pub(crate) struct GruStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone)]
pub(crate) struct GruGrads {
    w: [Vec<f64>; 3],
    u: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
}

impl GruGrads {
    fn zeros(input: usize, hidden: usize) -> Self {
        let w = || vec![0.0; hidden * input];
        let u = || vec![0.0; hidden * hidden];
        let b = || vec![0.0; hidden];
        GruGrads {
            w: [w(), w(), w()],
            u: [u(), u(), u()],
            b: [b(), b(), b()],
        }
    }

    fn add(&mut self, o: &GruGrads) {
        for g in 0..3 {
            axpy(1.0, &o.w[g], &mut self.w[g]);
            axpy(1.0, &o.u[g], &mut self.u[g]);
            axpy(1.0, &o.b[g], &mut self.b[g]);
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(9);
        for (g, gate) in GATES.iter().enumerate() {
            out.push((format!("{prefix}.W{gate}"), self.w[g].as_slice()));
            out.push((format!("{prefix}.U{gate}"), self.u[g].as_slice()));
            out.push((format!("{prefix}.b{gate}"), self.b[g].as_slice()));
        }
        out
    }
}

impl<'a> Gru<'a> {
    fn from_store(store: &'a ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let get = |kind: &str, g: &str| slice(store, &format!("{prefix}.{kind}{g}"));
        Ok(Gru {
            w: [get("W", "z")?, get("W", "r")?, get("W", "h")?],
            u: [get("U", "z")?, get("U", "r")?, get("U", "h")?],
            b: [get("b", "z")?, get("b", "r")?, get("b", "h")?],
            input,
            hidden,
        })
    }

    fn step(&self, x: &[f64], h_prev: &[f64]) -> GruStep {
        let cold = h_prev.iter().all(|v| *v == 0.0);
        let gate = |g: usize, h: &[f64]| {
            let mut a = self.b[g].to_vec();
            matvec_add(self.w[g], self.input, x, &mut a);
            if !cold {
                matvec_add(self.u[g], self.hidden, h, &mut a);
            }
            a
        };
        let z: Vec<f64> = gate(0, h_prev).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(1, h_prev).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
        let h = (0..self.hidden)
            .map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * n[j])
            .collect();
        GruStep {
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            h,
        }
    }

    fn run(&self, xs: &[&[f64]]) -> Vec<GruStep> {
        let mut steps: Vec<GruStep> = Vec::with_capacity(xs.len());
        let mut h = vec![0.0; self.hidden];
        for x in xs {
            let st = self.step(x, &h);
            h.clone_from(&st.h);
            steps.push(st);
        }
        steps
    }

    /// Backpropagation through time. All slices are in processing order.
    fn backward(
        &self,
        xs: &[&[f64]],
        steps: &[GruStep],
        dh_ext: &[&[f64]],
        g: &mut GruGrads,
        dx: &mut [&mut Vec<f64>],
    ) {
        let hd = self.hidden;
        let mut carry = vec![0.0; hd];
        let mut drh = vec![0.0; hd];
        for s in (0..steps.len()).rev() {
            let st = &steps[s];
            let x = xs[s];
            let dh: Vec<f64> = dh_ext[s].iter().zip(&carry).map(|(a, b)| a + b).collect();
            let mut da_n = vec![0.0; hd];
            let mut da_z = vec![0.0; hd];
            for j in 0..hd {
                carry[j] = dh[j] * (1.0 - st.z[j]);
                da_n[j] = dh[j] * st.z[j] * (1.0 - st.n[j] * st.n[j]);
                da_z[j] = dh[j] * (st.n[j] - st.h_prev[j]) * st.z[j] * (1.0 - st.z[j]);
            }
            let rh: Vec<f64> = st.r.iter().zip(&st.h_prev).map(|(a, b)| a * b).collect();
            outer_add(&da_n, x, &mut g.w[2]);
            outer_add(&da_n, &rh, &mut g.u[2]);
            axpy(1.0, &da_n, &mut g.b[2]);
            drh.fill(0.0);
            matvec_t_add(self.u[2], hd, &da_n, &mut drh);
            matvec_t_add(self.w[2], self.input, &da_n, dx[s]);
            let mut da_r = vec![0.0; hd];
            for j in 0..hd {
                carry[j] += drh[j] * st.r[j];
                da_r[j] = drh[j] * st.h_prev[j] * st.r[j] * (1.0 - st.r[j]);
            }
            for (gi, da) in [(0usize, &da_z), (1, &da_r)] {
                outer_add(da, x, &mut g.w[gi]);
                outer_add(da, &st.h_prev, &mut g.u[gi]);
                axpy(1.0, da, &mut g.b[gi]);
                matvec_t_add(self.w[gi], self.input, da, dx[s]);
                matvec_t_add(self.u[gi], hd, da, &mut carry);
            }
        }
    }
}

struct Attention<'a> {
    w: &'a [f64],
    b: &'a [f64],
    v: &'a [f64],
}

/// Queryless additive attention: `softmax_i(v . tanh(W h_i + b))`.
/// Returns the `tanh` activations alongside the weights.
pub(crate) fn attention_weights(
    w: &[f64],
    b: &[f64],
    v: &[f64],
    hidden: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut acts = Vec::with_capacity(hidden.len());
    let mut scores = Vec::with_capacity(hidden.len());
    for h in hidden {
        let mut u = b.to_vec();
        matvec_add(w, h.len(), h, &mut u);
        u.iter_mut().for_each(|x| *x = x.tanh());
        scores.push(dot(v, &u));
        acts.push(u);
    }
    softmax_in_place(&mut scores);
    (acts, scores)
}

/// Read-only view of the parameters a forward pass needs.
pub(crate) struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub vocab: usize,
    tables: Vec<&'a Tensor>,
    fwd: Gru<'a>,
    bwd: Option<Gru<'a>>,
    att: Option<Attention<'a>>,
    fc1: Option<(&'a [f64], &'a [f64])>,
    fc2: (&'a [f64], &'a [f64]),
}

/// Activations of one forward pass.
pub(crate) struct Cache {
    /// `[modality][position]`, after dropout.
    inputs: Vec<Vec<Vec<f64>>>,
    /// Same layout; empty vectors mean no mask.
    masks: Vec<Vec<Vec<f64>>>,
    fwd: Vec<GruStep>,
    bwd: Vec<GruStep>,
    pub hidden: Vec<Vec<f64>>,
    att_u: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
    fc1_pre: Vec<f64>,
    fc1_out: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Cache {
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        p
    }
}

#[derive(Clone)]
pub(crate) struct NetGrads {
    /// Touched rows per modality table.
    emb: Vec<BTreeMap<usize, Vec<f64>>>,
    fwd: GruGrads,
    bwd: Option<GruGrads>,
    att: Option<[Vec<f64>; 3]>,
    fc1: Option<[Vec<f64>; 2]>,
}

/// Output-layer inputs of one example, kept so the `|V| x head` weight
/// gradient can be formed once per batch instead of once per example.
pub(crate) struct HeadGrad {
    pub dlogits: Vec<f64>,
    pub input: Vec<f64>,
}

impl NetGrads {
    pub fn add(&mut self, o: &NetGrads) {
        for (mine, theirs) in self.emb.iter_mut().zip(&o.emb) {
            for (row, g) in theirs {
                match mine.get_mut(row) {
                    Some(m) => axpy(1.0, g, m),
                    None => {
                        mine.insert(*row, g.clone());
                    }
                }
            }
        }
        self.fwd.add(&o.fwd);
        if let (Some(a), Some(b)) = (self.bwd.as_mut(), o.bwd.as_ref()) {
            a.add(b);
        }
        if let (Some(a), Some(b)) = (self.att.as_mut(), o.att.as_ref()) {
            for i in 0..3 {
                axpy(1.0, &b[i], &mut a[i]);
            }
        }
        if let (Some(a), Some(b)) = (self.fc1.as_mut(), o.fc1.as_ref()) {
            for i in 0..2 {
                axpy(1.0, &b[i], &mut a[i]);
            }
        }
    }

    /// Copies into the store's gradient buffers, which must be zeroed.
    pub fn write_into(&self, store: &mut ParamStore, modalities: &[Modality]) -> Result<()> {
        for (m, rows) in modalities.iter().zip(&self.emb) {
            let g = store.grad_mut(m.table())?;
            for (row, v) in rows {
                axpy(1.0, v, g.row_mut(*row));
            }
        }
        let mut dense = self.fwd.named("gru_f");
        if let Some(b) = &self.bwd {
            dense.extend(b.named("gru_b"));
        }
        if let Some([w, b, v]) = &self.att {
            dense.push(("att.W".into(), w));
            dense.push(("att.b".into(), b));
            dense.push(("att.v".into(), v));
        }
        if let Some([w, b]) = &self.fc1 {
            dense.push(("fc1.W".into(), w));
            dense.push(("fc1.b".into(), b));
        }
        for (name, v) in dense {
            axpy(1.0, v, store.grad_mut(&name)?.data_mut());
        }
        Ok(())
    }
}

impl<'a> Net<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig, vocab: usize) -> Result<Self> {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let tables = cfg
            .modalities()
            .into_iter()
            .map(|m| store.get(m.table()))
            .collect::<Result<Vec<_>>>()?;
        let gru4rec = cfg.baseline == Baseline::Gru4rec;
        let pair = |a: &str, b: &str| -> Result<(&'a [f64], &'a [f64])> {
            Ok((slice(store, a)?, slice(store, b)?))
        };
        Ok(Net {
            cfg,
            vocab,
            tables,
            fwd: Gru::from_store(store, "gru_f", d, h)?,
            bwd: if gru4rec {
                None
            } else {
                Some(Gru::from_store(store, "gru_b", d, h)?)
            },
            att: if gru4rec {
                None
            } else {
                Some(Attention {
                    w: slice(store, "att.W")?,
                    b: slice(store, "att.b")?,
                    v: slice(store, "att.v")?,
                })
            },
            fc1: if gru4rec {
                None
            } else {
                Some(pair("fc1.W", "fc1.b")?)
            },
            fc2: pair("fc2.W", "fc2.b")?,
        })
    }

    fn fc1_in(&self) -> usize {
        self.cfg.hidden_dim + self.cfg.embed_dim * (self.tables.len() - 1)
    }

    pub fn head_in(&self) -> usize {
        if self.fc1.is_some() {
            self.cfg.fusion_dim
        } else {
            self.cfg.hidden_dim
        }
    }

    pub fn zero_grads(&self) -> NetGrads {
        let (d, h, f) = (self.cfg.embed_dim, self.cfg.hidden_dim, self.cfg.fusion_dim);
        NetGrads {
            emb: vec![BTreeMap::new(); self.tables.len()],
            fwd: GruGrads::zeros(d, h),
            bwd: self.bwd.as_ref().map(|_| GruGrads::zeros(d, h)),
            att: self
                .att
                .as_ref()
                .map(|_| [vec![0.0; h * h], vec![0.0; h], vec![0.0; h]]),
            fc1: self
                .fc1
                .as_ref()
                .map(|_| [vec![0.0; f * self.fc1_in()], vec![0.0; f]]),
        }
    }

    /// Embedding lookups with dropout (when `rng` is given) for every modality.
    pub fn embed(&self, prefix: &[usize], mut rng: Option<&mut SeededRng>) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&x| x >= self.vocab) {
            return Err(Error::InvalidArgument(format!(
                "track index {} out of range for vocabulary of {}",
                bad, self.vocab
            )));
        }
        let p = self.cfg.dropout;
        let keep = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
        let mut inputs = Vec::with_capacity(self.tables.len());
        let mut masks = Vec::with_capacity(self.tables.len());
        for table in &self.tables {
            let mut seq = Vec::with_capacity(prefix.len());
            let mut mseq = Vec::with_capacity(prefix.len());
            for &x in prefix {
                let row = table.row(x);
                match rng.as_deref_mut() {
                    Some(r) if p > 0.0 => {
                        let mask: Vec<f64> = (0..row.len())
                            .map(|_| if r.bernoulli(p) { 0.0 } else { keep })
                            .collect();
                        seq.push(row.iter().zip(&mask).map(|(a, m)| a * m).collect());
                        mseq.push(mask);
                    }
                    _ => {
                        seq.push(row.to_vec());
                        mseq.push(Vec::new());
                    }
                }
            }
            inputs.push(seq);
            masks.push(mseq);
        }
        Ok((inputs, masks))
    }

    pub fn forward(&self, prefix: &[usize], rng: Option<&mut SeededRng>) -> Result<Cache> {
        let (inputs, masks) = self.embed(prefix, rng)?;
        let n = prefix.len();
        let xs: Vec<&[f64]> = inputs[0].iter().map(Vec::as_slice).collect();
        let fwd = self.fwd.run(&xs);
        let (bwd, hidden) = match &self.bwd {
            Some(g) => {
                let rev: Vec<&[f64]> = xs.iter().rev().copied().collect();
                let bwd = g.run(&rev);
                let hidden = (0..n)
                    .map(|t| {
                        fwd[t]
                            .h
                            .iter()
                            .zip(&bwd[n - 1 - t].h)
                            .map(|(a, b)| a + b)
                            .collect()
                    })
                    .collect();
                (bwd, hidden)
            }
            None => (Vec::new(), fwd.iter().map(|s| s.h.clone()).collect::<Vec<Vec<f64>>>()),
        };

        let mut cache = Cache {
            inputs,
            masks,
            fwd,
            bwd,
            hidden,
            att_u: Vec::new(),
            alpha: Vec::new(),
            contexts: Vec::new(),
            fc1_pre: Vec::new(),
            fc1_out: Vec::new(),
            logits: Vec::new(),
        };
        let (fc2_w, fc2_b) = self.fc2;
        let head_in = self.head_in();

        let (Some(att), Some((w1, b1))) = (&self.att, self.fc1) else {
            // Last hidden state straight into the output layer.
            let mut logits = fc2_b.to_vec();
            matvec_add(fc2_w, head_in, &cache.hidden[n - 1], &mut logits);
            cache.alpha = (0..n).map(|t| if t + 1 == n { 1.0 } else { 0.0 }).collect();
            cache.contexts = vec![cache.hidden[n - 1].clone()];
            cache.logits = logits;
            return Ok(cache);
        };

        let (u, alpha) = attention_weights(att.w, att.b, att.v, &cache.hidden);
        cache.att_u = u;
        cache.alpha = alpha;

        let mut contexts = Vec::with_capacity(self.tables.len());
        for k in 0..self.tables.len() {
            let seq = if k == 0 { &cache.hidden } else { &cache.inputs[k] };
            let mut c = vec![0.0; seq[0].len()];
            for (a, v) in cache.alpha.iter().zip(seq) {
                axpy(*a, v, &mut c);
            }
            contexts.push(c);
        }

        let cols = self.fc1_in();
        let mut pre = b1.to_vec();
        for (i, row) in w1.chunks_exact(cols).enumerate() {
            let mut off = 0;
            for c in &contexts {
                pre[i] += dot(&row[off..off + c.len()], c);
                off += c.len();
            }
        }
        let slope = self.cfg.leaky_slope;
        let out: Vec<f64> = pre.iter().map(|v| leaky_relu(*v, slope)).collect();
        let mut logits = fc2_b.to_vec();
        matvec_add(fc2_w, head_in, &out, &mut logits);
        cache.contexts = contexts;
        cache.fc1_pre = pre;
        cache.fc1_out = out;
        cache.logits = logits;
        Ok(cache)
    }

    /// Adds `scale * d(loss)/d(params)` into `g` for everything except the
    /// output layer, whose factors are returned. Also returns the unscaled loss.
    pub fn backward(
        &self,
        cache: &Cache,
        prefix: &[usize],
        target: usize,
        scale: f64,
        g: &mut NetGrads,
    ) -> Result<(f64, HeadGrad)> {
        let ce = cross_entropy_loss(&cache.logits, target)?;
        let n = prefix.len();
        let (hd, ed) = (self.cfg.hidden_dim, self.cfg.embed_dim);
        let head_in = self.head_in();
        let head: &[f64] = if self.fc1.is_some() {
            &cache.fc1_out
        } else {
            &cache.hidden[n - 1]
        };

        let (fc2_w, _) = self.fc2;
        let dlogits: Vec<f64> = ce.grad.iter().map(|v| v * scale).collect();
        let mut dhead = vec![0.0; head_in];
        matvec_t_add(fc2_w, head_in, &dlogits, &mut dhead);
        let head_grad = HeadGrad {
            dlogits,
            input: head.to_vec(),
        };

        let mut dh = vec![vec![0.0; hd]; n];
        let mut dinputs: Vec<Vec<Vec<f64>>> = (0..self.tables.len())
            .map(|_| vec![vec![0.0; ed]; n])
            .collect();

        match (&self.att, self.fc1) {
            (Some(att), Some((w1, _))) => {
                let slope = self.cfg.leaky_slope;
                let da: Vec<f64> = dhead
                    .iter()
                    .zip(&cache.fc1_pre)
                    .map(|(d, p)| d * leaky_relu_grad(*p, slope))
                    .collect();
                let cols = self.fc1_in();
                let [gw1, gb1] = g.fc1.as_mut().expect("fc1 grads");
                axpy(1.0, &da, gb1);
                let mut dctx: Vec<Vec<f64>> =
                    cache.contexts.iter().map(|c| vec![0.0; c.len()]).collect();
                for (i, d) in da.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &w1[i * cols..(i + 1) * cols];
                    let grow = &mut gw1[i * cols..(i + 1) * cols];
                    let mut off = 0;
                    for (c, dc) in cache.contexts.iter().zip(dctx.iter_mut()) {
                        let len = c.len();
                        axpy(*d, c, &mut grow[off..off + len]);
                        axpy(*d, &row[off..off + len], dc);
                        off += len;
                    }
                }

                let mut dalpha = vec![0.0; n];
                for t in 0..n {
                    let a = cache.alpha[t];
                    dalpha[t] += dot(&dctx[0], &cache.hidden[t]);
                    axpy(a, &dctx[0], &mut dh[t]);
                    for k in 1..self.tables.len() {
                        dalpha[t] += dot(&dctx[k], &cache.inputs[k][t]);
                        axpy(a, &dctx[k], &mut dinputs[k][t]);
                    }
                }
                let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                let [gw, gb, gv] = g.att.as_mut().expect("attention grads");
                for t in 0..n {
                    let ds = cache.alpha[t] * (dalpha[t] - mean);
                    if ds == 0.0 {
                        continue;
                    }
                    let u = &cache.att_u[t];
                    axpy(ds, u, gv);
                    let dpre: Vec<f64> = att
                        .v
                        .iter()
                        .zip(u)
                        .map(|(v, u)| ds * v * (1.0 - u * u))
                        .collect();
                    outer_add(&dpre, &cache.hidden[t], gw);
                    axpy(1.0, &dpre, gb);
                    matvec_t_add(att.w, hd, &dpre, &mut dh[t]);
                }
            }
            _ => dh[n - 1].copy_from_slice(&dhead),
        }

        let xs: Vec<&[f64]> = cache.inputs[0].iter().map(Vec::as_slice).collect();
        let (track_dx, _) = dinputs.split_at_mut(1);
        let track_dx = &mut track_dx[0];
        {
            let dh_ext: Vec<&[f64]> = dh.iter().map(Vec::as_slice).collect();
            let mut dx: Vec<&mut Vec<f64>> = track_dx.iter_mut().collect();
            self.fwd.backward(&xs, &cache.fwd, &dh_ext, &mut g.fwd, &mut dx);
        }
        if let Some(bw) = &self.bwd {
            let rev: Vec<&[f64]> = xs.iter().rev().copied().collect();
            let dh_ext: Vec<&[f64]> = dh.iter().rev().map(Vec::as_slice).collect();
            let mut dx: Vec<&mut Vec<f64>> = track_dx.iter_mut().rev().collect();
            bw.backward(&rev, &cache.bwd, &dh_ext, g.bwd.as_mut().expect("bwd grads"), &mut dx);
        }

        for (k, rows) in g.emb.iter_mut().enumerate() {
            for (t, &x) in prefix.iter().enumerate() {
                let mut d = std::mem::take(&mut dinputs[k][t]);
                let mask = &cache.masks[k][t];
                if !mask.is_empty() {
                    d.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                }
                match rows.get_mut(&x) {
                    Some(r) => axpy(1.0, &d, r),
                    None => {
                        rows.insert(x, d);
                    }
                }
            }
        }
        Ok((ce.loss, head_grad))
    }
}

/// `G += sum_e dlogits_e input_eᵀ` and `b += sum_e dlogits_e`, examples in
/// order, rows in parallel.
pub(crate) fn accumulate_head(heads: &[HeadGrad], gw: &mut [f64], gb: &mut [f64]) {
    let Some(first) = heads.first() else { return };
    let cols = first.input.len();
    const ROWS: usize = 64;
    exec::for_each_chunk_mut(gw, cols * ROWS, |c, block| {
        for (r, row) in block.chunks_exact_mut(cols).enumerate() {
            let i = c * ROWS + r;
            for h in heads {
                axpy(h.dlogits[i], &h.input, row);
            }
        }
    });
    for (i, b) in gb.iter_mut().enumerate() {
        for h in heads {
            *b += h.dlogits[i];
        }
    }
}
