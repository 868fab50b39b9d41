use std::collections::HashMap;

use rand::RngCore;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Element;

use super::params::{
    decoder_block_path, decoder_end_path, decoder_up_path, encoder_block_path, encoder_down_path, init_conv_path,
    ParameterStore,
};
use super::{encoder_block_name, NormConfig};

/// Output of [`forward_traced`]: probabilities plus `(layer, shape)` per plan row.
pub struct ForwardTrace {
    pub output: Var,
    pub layers: Vec<(String, Vec<usize>)>,
}

struct Ctx<'a, T: Element> {
    tape: &'a mut Tape<T>,
    store: &'a mut ParameterStore<T>,
    vars: &'a [Var],
    index: HashMap<String, usize>,
    mode: Mode,
}

impl<T: Element> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::State(format!("parameter `{name}` missing from store")))
    }

    fn conv(&mut self, x: Var, path: &str, stride: usize) -> Result<Var> {
        let kernel = self.var(&format!("{path}.kernel"))?;
        let bias = self.index.contains_key(&format!("{path}.bias")).then(|| self.var(&format!("{path}.bias"))).transpose()?;
        let k = self.tape.value(kernel).shape()[2];
        self.tape.conv3d(x, kernel, bias, stride, k / 2)
    }

    fn norm(&mut self, x: Var, path: &str) -> Result<Var> {
        let gamma = self.var(&format!("{path}.gamma"))?;
        let beta = self.var(&format!("{path}.beta"))?;
        let eps = self.store.config.norm_eps;
        let c = self.tape.value(x).dims5()?[1];
        match self.store.config.norm.groups(c)? {
            Some(groups) => self.tape.group_norm(x, groups, gamma, beta, eps),
            None => {
                debug_assert!(matches!(self.store.config.norm, NormConfig::Batch { .. }));
                let stats = self
                    .store
                    .running
                    .get_mut(path)
                    .ok_or_else(|| Error::State(format!("running statistics for `{path}` missing")))?;
                self.tape.batch_norm(x, gamma, beta, eps, self.mode, stats)
            }
        }
    }

    /// `x + conv2(relu(norm2(conv1(relu(norm1(x))))))`
    fn block(&mut self, x: Var, path: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{path}.norm1"))?;
        let h = self.tape.relu(h)?;
        let h = self.conv(h, &format!("{path}.conv1"), 1)?;
        let h = self.norm(h, &format!("{path}.norm2"))?;
        let h = self.tape.relu(h)?;
        let h = self.conv(h, &format!("{path}.conv2"), 1)?;
        self.tape.add(x, h)
    }
}

/// Sigmoid probabilities `[N, out_channels, D, H, W]` for `input`
/// `[N, in_channels, D, H, W]`. `vars` come from [`ParameterStore::bind`].
/// Train-mode batch norm folds batch statistics into the store.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParameterStore<T>,
    vars: &[Var],
    input: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    run(tape, store, vars, input, mode, rng, None)
}

pub fn forward_traced<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParameterStore<T>,
    vars: &[Var],
    input: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<ForwardTrace> {
    let mut layers = Vec::new();
    let output = run(tape, store, vars, input, mode, rng, Some(&mut layers))?;
    Ok(ForwardTrace { output, layers })
}

fn run<T: Element>(
    tape: &mut Tape<T>,
    store: &mut ParameterStore<T>,
    vars: &[Var],
    input: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
    mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
) -> Result<Var> {
    let cfg = store.config.clone();
    let [_, c, d, h, w] = tape.value(input).dims5()?;
    if c != cfg.in_channels {
        return Err(shape_err!("input has {c} channels, model expects {}", cfg.in_channels));
    }
    cfg.check_extents([d, h, w]).map_err(|e| shape_err!("{e}"))?;
    if vars.len() != store.params.len() {
        return Err(Error::Argument(format!("{} vars bound for {} parameters", vars.len(), store.params.len())));
    }
    let index = store.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    let mut cx = Ctx { tape, store, vars, index, mode };
    let mut record = |name: &str, v: Var, tape: &Tape<T>| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((name.to_string(), tape.value(v).shape().to_vec()));
        }
    };
    record("Input", input, cx.tape);

    let mut x = cx.conv(input, init_conv_path(), 1)?;
    record("InitConv", x, cx.tape);
    x = cx.tape.spatial_dropout(x, cfg.dropout_rate, mode, rng)?;

    let mut skips = Vec::with_capacity(cfg.levels());
    for (level, &blocks) in cfg.blocks_per_level.iter().enumerate() {
        if level > 0 {
            x = cx.conv(x, &encoder_down_path(level), 2)?;
            record(&format!("EncoderDown{level}"), x, cx.tape);
        }
        for blk in 0..blocks {
            x = cx.block(x, &encoder_block_path(level, blk))?;
        }
        record(&encoder_block_name(level), x, cx.tape);
        skips.push(x);
    }

    for level in (0..cfg.levels() - 1).rev() {
        x = cx.conv(x, &decoder_up_path(level), 1)?;
        x = cx.tape.upsample_trilinear2x(x)?;
        x = cx.tape.add(x, skips[level])?;
        record(&format!("DecoderUp{level}"), x, cx.tape);
        x = cx.block(x, &decoder_block_path(level))?;
        record(&format!("DecoderBlock{level}"), x, cx.tape);
    }

    x = cx.conv(x, decoder_end_path(), 1)?;
    let out = cx.tape.sigmoid(x)?;
    record("DecoderEnd", out, cx.tape);
    Ok(out)
}
