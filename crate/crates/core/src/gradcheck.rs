//! Central-difference verification of analytic gradients.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamGroup};

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step h in (f(x+h) - f(x-h)) / 2h.
    pub fd_step: f64,
    pub tolerance: f64,
    /// Cap on probed coordinates per parameter; 0 checks every coordinate.
    pub max_coords_per_param: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            fd_step: 1e-5,
            tolerance: 1e-5,
            max_coords_per_param: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: IndexMap<String, f64>,
    pub passed: bool,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `loss_fn`'s analytic gradients against central finite
/// differences at `params`. The loss must be deterministic; two base
/// evaluations are compared bit-for-bit to detect violations.
pub fn grad_check<P, F>(
    loss_fn: F,
    params: &P,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport>
where
    P: ParamGroup + Clone,
    F: Fn(&P) -> Result<(f64, GradMap)>,
{
    let (base, grads) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::Config(format!("loss at base point is {base}")));
    }
    let (again, _) = loss_fn(params)?;
    if base != again {
        return Err(Error::NonDeterministicLoss {
            first: base,
            second: again,
        });
    }

    let mut shapes: Vec<(String, usize)> = Vec::new();
    params.for_each(&mut |name, t| shapes.push((name.to_string(), t.numel())));

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_parameter_errors: IndexMap::new(),
        passed: false,
    };

    let mut work = params.clone();
    for (name, numel) in &shapes {
        let coords: Vec<usize> = {
            let mut all: Vec<usize> = (0..*numel).collect();
            if settings.max_coords_per_param > 0 && *numel > settings.max_coords_per_param {
                all.shuffle(&mut rng);
                all.truncate(settings.max_coords_per_param);
            }
            all
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            nudge(&mut work, name, i, settings.fd_step);
            let (plus, _) = loss_fn(&work)?;
            nudge(&mut work, name, i, -2.0 * settings.fd_step);
            let (minus, _) = loss_fn(&work)?;
            nudge(&mut work, name, i, settings.fd_step);

            let numeric = (plus - minus) / (2.0 * settings.fd_step);
            let analytic = grads
                .get(name.as_str())
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_parameter_errors.insert(name.clone(), worst);
    }
    report.passed = report.max_relative_error < settings.tolerance;
    Ok(report)
}

fn nudge(params: &mut dyn ParamGroup, target: &str, coord: usize, delta: f64) {
    params.for_each_mut(&mut |name, t| {
        if name == target {
            t.data_mut()[coord] += delta;
        }
    });
}

/// Ready-made gradient-fidelity checks over the primitive operations,
/// a one-layer encoder, and the full bilingual loss. The CLI `gradcheck`
/// command and the acceptance suite both run these.
pub mod suite {
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{grad_check, GradCheckReport, GradCheckSettings};
    use crate::data::{generate_synthetic_bilingual, SyntheticConfig};
    use crate::dual::{dual_forward_loss, DualConfig, DualParams, LambdaMode};
    use crate::encoder::{encode_on_tape, EncoderConfig, EncoderParams};
    use crate::error::Result;
    use crate::params::{GradMap, ParamBag, ParamGroup};
    use crate::tape::{NodeId, Tape};
    use crate::tensor::Tensor;
    use crate::text::{encode_pair, TokenizeMode, Vocabulary};

    #[derive(Clone, Debug)]
    pub struct SuiteEntry {
        pub name: String,
        pub report: GradCheckReport,
    }

    pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
    pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(rows, cols, data).expect("shape")
    }

    fn readout(tape: &mut Tape, x: NodeId, weights: &Tensor) -> NodeId {
        let (rows, cols) = weights.shape();
        let weighted = tape.mul_const(x, weights.clone()).expect("shape");
        let left = tape.leaf(Tensor::filled(1, rows, 1.0));
        let right = tape.leaf(Tensor::filled(cols, 1, 1.0));
        let summed = tape.matmul(left, weighted).expect("shape");
        tape.matmul(summed, right).expect("shape")
    }

    type Builder = fn(&mut Tape, &IndexMap<String, NodeId>) -> Result<NodeId>;

    fn primitive_table() -> Vec<(&'static str, Vec<(&'static str, (usize, usize))>, Builder, (usize, usize))> {
        vec![
            ("matmul", vec![("a", (4, 3)), ("b", (3, 5))],
             |t, ids| t.matmul(ids["a"], ids["b"]), (4, 5)),
            ("add", vec![("a", (4, 5)), ("b", (4, 5))],
             |t, ids| t.add(ids["a"], ids["b"]), (4, 5)),
            ("add_row", vec![("mat", (5, 3)), ("row", (1, 3))],
             |t, ids| t.add_row(ids["mat"], ids["row"]), (5, 3)),
            ("scale", vec![("x", (2, 6))],
             |t, ids| Ok(t.scale(ids["x"], -0.37)), (2, 6)),
            ("transpose", vec![("x", (3, 7))],
             |t, ids| Ok(t.transpose(ids["x"])), (7, 3)),
            ("masked_softmax", vec![("x", (4, 6))],
             |t, ids| t.masked_softmax(ids["x"], &[true, false, true, true, true, true]), (4, 6)),
            ("layer_norm", vec![("x", (4, 6)), ("gain", (1, 6)), ("bias", (1, 6))],
             |t, ids| t.layer_norm(ids["x"], ids["gain"], ids["bias"], 1e-12), (4, 6)),
            ("gelu", vec![("x", (4, 4))],
             |t, ids| Ok(t.gelu(ids["x"])), (4, 4)),
            ("cross_entropy", vec![("logits", (1, 6))],
             |t, ids| {
                 let probs = t.masked_softmax(ids["logits"], &[true; 6])?;
                 t.cross_entropy(probs, 2)
             }, (1, 1)),
            ("cosine", vec![("u", (1, 5)), ("v", (1, 5))],
             |t, ids| t.cosine(ids["u"], ids["v"]), (1, 1)),
            ("gather", vec![("table", (6, 4))],
             |t, ids| t.gather(ids["table"], &[0, 3, 3, 5, 1]), (5, 4)),
            ("slice_rows", vec![("x", (6, 3))],
             |t, ids| t.slice_rows(ids["x"], 2, 3), (3, 3)),
            ("slice_cols", vec![("x", (3, 8))],
             |t, ids| t.slice_cols(ids["x"], 1, 4), (3, 4)),
            ("concat_cols", vec![("a", (4, 2)), ("b", (4, 3))],
             |t, ids| t.concat_cols(ids["a"], ids["b"]), (4, 5)),
            ("mean_rows", vec![("x", (5, 4))],
             |t, ids| Ok(t.mean_rows(ids["x"])), (1, 4)),
        ]
    }

    /// Check every primitive at `PRIMITIVE_TOLERANCE` for the given seeds.
    pub fn primitives(seeds: u64) -> Result<Vec<SuiteEntry>> {
        let mut out = Vec::new();
        for (name, inputs, builder, out_shape) in primitive_table() {
            let mut worst: Option<GradCheckReport> = None;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
                let mut bag = ParamBag::new();
                for (input_name, (r, c)) in &inputs {
                    let mut t = random_tensor(&mut rng, *r, *c);
                    if name == "cosine" {
                        // Keep the vectors clear of zero norm.
                        t.data_mut()[0] += 2.0;
                    }
                    bag.insert(*input_name, t);
                }
                let weights = random_tensor(&mut rng, out_shape.0, out_shape.1);
                let loss_fn = |p: &ParamBag| -> Result<(f64, GradMap)> {
                    let mut tape = Tape::new();
                    let mut ids: IndexMap<String, NodeId> = IndexMap::new();
                    p.for_each(&mut |n, t| {
                        ids.insert(n.to_string(), tape.leaf(t.clone()));
                    });
                    let node = builder(&mut tape, &ids)?;
                    let loss = readout(&mut tape, node, &weights);
                    tape.backward(loss)?;
                    let mut grads = GradMap::new();
                    for (n, &id) in &ids {
                        grads.insert(n.clone(), tape.grad_or_zeros(id));
                    }
                    Ok((tape.value(loss).item(), grads))
                };
                let settings = GradCheckSettings {
                    tolerance: PRIMITIVE_TOLERANCE,
                    ..GradCheckSettings::default()
                };
                let report = grad_check(loss_fn, &bag, &settings)?;
                if worst
                    .as_ref()
                    .map(|w| report.max_relative_error > w.max_relative_error)
                    .unwrap_or(true)
                {
                    worst = Some(report);
                }
            }
            out.push(SuiteEntry {
                name: name.to_string(),
                report: worst.expect("at least one seed"),
            });
        }
        Ok(out)
    }

    /// Move parameters to a generic point. At the 0.02-std init the
    /// attention logits are microscopic, their gradients sit near the
    /// 1e-8 relative-error floor, and finite differences drown in
    /// cancellation noise.
    fn randomize(params: &mut dyn ParamGroup, rng: &mut ChaCha8Rng) {
        params.for_each_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        });
    }

    fn suite_inputs(
        hidden: usize,
        max_len: usize,
        examples: usize,
        seed: u64,
    ) -> Result<(
        EncoderConfig,
        Vocabulary,
        Vocabulary,
        Vec<crate::data::BilingualExample>,
    )> {
        let synth = generate_synthetic_bilingual(&SyntheticConfig {
            num_examples: examples,
            filler_vocab: 12,
            cue_vocab: 3,
            passage_len_range: (5, 6),
            answer_len_range: (1, 2),
            ambiguity_rate: 0.0,
            seed,
        })?;
        let corpus_t: Vec<String> = synth
            .examples
            .iter()
            .flat_map(|b| [b.target.passage.clone(), b.target.question.clone()])
            .collect();
        let corpus_s: Vec<String> = synth
            .examples
            .iter()
            .flat_map(|b| [b.source.passage.clone(), b.source.question.clone()])
            .collect();
        let vocab_t = Vocabulary::build(&corpus_t, TokenizeMode::Whitespace, 48)?;
        let vocab_s = Vocabulary::build(&corpus_s, TokenizeMode::Whitespace, 48)?;
        let config = EncoderConfig {
            vocab_size: 48,
            hidden_size: hidden,
            num_layers: 1,
            num_heads: 2,
            ffn_size: 2 * hidden,
            max_len,
            dropout_rate: 0.0,
            seed,
        };
        Ok((config, vocab_t, vocab_s, synth.examples))
    }

    /// One-layer encoder on a 2-example batch at `COMPOSITE_TOLERANCE`.
    pub fn encoder_one_layer(hidden: usize, seeds: u64) -> Result<Vec<SuiteEntry>> {
        let mut out = Vec::new();
        for seed in 0..seeds {
            let (config, vocab_t, _, examples) = suite_inputs(hidden, 16, 2, seed + 40)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<_> = examples
                .iter()
                .map(|b| encode_pair(&b.target.question, &b.target.passage, &vocab_t, 16))
                .collect::<Result<_>>()?;
            let weights: Vec<Tensor> = pairs
                .iter()
                .map(|p| random_tensor(&mut rng, p.len(), hidden))
                .collect();
            let mut params = crate::encoder::init_params(&config)?;
            randomize(&mut params, &mut rng);
            let loss_fn = |p: &EncoderParams<Tensor>| -> Result<(f64, GradMap)> {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape);
                let mut total: Option<NodeId> = None;
                for (pair, w) in pairs.iter().zip(&weights) {
                    let encoded = encode_on_tape(&mut tape, &bound, &config, pair, None)?;
                    let scalar = readout(&mut tape, encoded, w);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, scalar)?,
                        None => scalar,
                    });
                }
                let loss = total.expect("two examples");
                tape.backward(loss)?;
                let mut grads = GradMap::new();
                bound.collect_grads(&tape, "", &mut grads);
                Ok((tape.value(loss).item(), grads))
            };
            let settings = GradCheckSettings {
                tolerance: COMPOSITE_TOLERANCE,
                max_coords_per_param: 6,
                seed,
                ..GradCheckSettings::default()
            };
            let report = grad_check(loss_fn, &params, &settings)?;
            out.push(SuiteEntry {
                name: format!("encoder(h={hidden}) seed {seed}"),
                report,
            });
        }
        Ok(out)
    }

    /// Parameters whose gradient is identically zero because they shift
    /// every position's logit by the same amount, which cancels in the
    /// positions softmax. Finite differences on them measure pure
    /// rounding noise, so they are verified as exact zeros instead.
    pub const POSITION_SOFTMAX_DEAD: [&str; 3] =
        ["target_head.bias", "source_head.bias", "fusion.norm_bias"];

    #[derive(Clone)]
    struct LiveView(DualParams<Tensor>);

    impl ParamGroup for LiveView {
        fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            self.0.visit(&mut |name, t| {
                if !POSITION_SOFTMAX_DEAD.contains(&name.as_str()) {
                    f(&name, t);
                }
            });
        }

        fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            self.0.visit_mut(&mut |name, t| {
                if !POSITION_SOFTMAX_DEAD.contains(&name.as_str()) {
                    f(&name, t);
                }
            });
        }
    }

    /// Full bilingual loss (batch of 2) at `COMPOSITE_TOLERANCE`. The
    /// auxiliary weight is held fixed: the dynamic weight is detached by
    /// design, so finite differences would disagree through its inputs.
    pub fn dual_model(hidden: usize, seeds: u64) -> Result<Vec<SuiteEntry>> {
        let mut out = Vec::new();
        for seed in 0..seeds {
            let (encoder, vocab_t, vocab_s, examples) = suite_inputs(hidden, 12, 2, seed + 80)?;
            let mut config = DualConfig::new(encoder);
            config.lambda_mode = LambdaMode::Fixed(0.7);
            let mut params = DualParams::init(&config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            randomize(&mut params, &mut rng);
            let loss_fn = |p: &LiveView| -> Result<(f64, GradMap)> {
                let mut tape = Tape::new();
                let bound = p.0.bind(&mut tape);
                let mut total: Option<NodeId> = None;
                for example in &examples {
                    let fwd = dual_forward_loss(
                        &mut tape, example, &bound, &vocab_t, &vocab_s, &config, None,
                    )?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, fwd.loss)?,
                        None => fwd.loss,
                    });
                }
                let sum = total.expect("two examples");
                let loss = tape.scale(sum, 0.5);
                tape.backward(loss)?;
                let grads = bound.collect_grads(&tape);
                // The dead parameters must come out as numerical zeros.
                for name in POSITION_SOFTMAX_DEAD {
                    let g = &grads[name];
                    for &v in g.data() {
                        if v.abs() > 1e-12 {
                            return Err(crate::error::Error::Config(format!(
                                "supposedly dead parameter {name} has gradient {v}"
                            )));
                        }
                    }
                }
                Ok((tape.value(loss).item(), grads))
            };
            let settings = GradCheckSettings {
                tolerance: COMPOSITE_TOLERANCE,
                max_coords_per_param: 5,
                seed,
                ..GradCheckSettings::default()
            };
            let report = grad_check(loss_fn, &LiveView(params), &settings)?;
            out.push(SuiteEntry {
                name: format!("dual(h={hidden}) seed {seed}"),
                report,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBag;
    use crate::tensor::Tensor;

    fn single(name: &str, value: f64) -> ParamBag {
        let mut bag = ParamBag::new();
        bag.insert(name, Tensor::scalar(value));
        bag
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // f(x) = x^2 at x = 3: analytic gradient 6.
        let params = single("x", 3.0);
        let report = grad_check(
            |p: &ParamBag| {
                let x = p.get("x").unwrap().item();
                let mut g = GradMap::new();
                g.insert("x".into(), Tensor::scalar(2.0 * x));
                Ok((x * x, g))
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn linear_is_exact_to_machine_precision() {
        // f(x) = 3x: central differences are exact for linear functions.
        let params = single("x", 1.25);
        let report = grad_check(
            |p: &ParamBag| {
                let x = p.get("x").unwrap().item();
                let mut g = GradMap::new();
                g.insert("x".into(), Tensor::scalar(3.0));
                Ok((3.0 * x, g))
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let params = single("x", 2.0);
        let report = grad_check(
            |p: &ParamBag| {
                let x = p.get("x").unwrap().item();
                let mut g = GradMap::new();
                g.insert("x".into(), Tensor::scalar(5.0 * x)); // should be 2x
                Ok((x * x, g))
            },
            &params,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        use std::cell::Cell;
        let params = single("x", 1.0);
        let calls = Cell::new(0u32);
        let result = grad_check(
            |p: &ParamBag| {
                calls.set(calls.get() + 1);
                let x = p.get("x").unwrap().item();
                Ok((x + calls.get() as f64 * 1e-3, GradMap::new()))
            },
            &params,
            &GradCheckSettings::default(),
        );
        assert!(matches!(result, Err(Error::NonDeterministicLoss { .. })));
    }
}
