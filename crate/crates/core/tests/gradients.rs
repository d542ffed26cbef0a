//! Central-difference checks of every analytic gradient, in f64.

use bmmae_core::masking::sample_mask_plan;
use bmmae_core::modality::Modality;
use bmmae_core::model::{pretrain_loss, pretrain_loss_and_grad, ModelConfig, ModelState};
use bmmae_core::params::Parameters;
use bmmae_core::synth::generate_synthetic_cohort;
use bmmae_core::volume::preprocess;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn micro() -> ModelConfig {
    ModelConfig {
        dim: 12,
        depth: 2,
        heads: 2,
        mlp_dim: 24,
        dec_dim: 6,
        dec_depth: 1,
        dec_heads: 2,
        patch: 4,
        alpha: 1.0,
        mask_ratio: 0.75,
        input_shape: (8, 8, 8),
    }
}

/// Perturbs up to `per_tensor` entries of every named tensor and compares
/// against the analytic gradient. Returns the worst relative error.
fn check<P: Parameters<f64> + Clone>(
    state: &P,
    grads: &P,
    per_tensor: usize,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let names: Vec<(String, usize)> = state
        .named_parameters()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = grads
        .named_parameters()
        .iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();
    let mut worst: f64 = 0.0;
    for (ti, (name, len)) in names.iter().enumerate() {
        let step = (len / per_tensor).max(1);
        for j in (0..*len).step_by(step).take(per_tensor) {
            let bump = |delta: f64| {
                let mut s = state.clone();
                s.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.as_mut_slice()[j] += delta;
                    }
                });
                loss(&s)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let a = analytic[ti][j];
            if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
                continue;
            }
            let e = rel_err(a, numeric);
            assert!(
                e < TOL,
                "{name}[{j}]: analytic {a:e} numeric {numeric:e} rel {e:e}"
            );
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn pretraining_gradients_match_central_differences() {
    let cfg = micro();
    let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let raw = generate_synthetic_cohort(1, cfg.input_shape, 2, cfg.patch).unwrap();
    let v = preprocess(&raw[0].volume, cfg.input_shape).unwrap();
    let plan = sample_mask_plan(
        8,
        &Modality::ALL,
        0.75,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let (_, grads) = pretrain_loss_and_grad(&v, &plan, &state, &cfg).unwrap();
    check(&state, &grads, 3, |s| {
        pretrain_loss(&v, &plan, s, &cfg).unwrap()
    });
}

#[test]
fn subset_plan_gradients_match_central_differences() {
    let cfg = micro();
    let state = ModelState::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let raw = generate_synthetic_cohort(1, cfg.input_shape, 5, cfg.patch).unwrap();
    let v = preprocess(&raw[0].volume, cfg.input_shape).unwrap();
    let subset = [Modality::T1c, Modality::Flair];
    let plan = sample_mask_plan(8, &subset, 0.5, 0.5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (_, grads) = pretrain_loss_and_grad(&v, &plan, &state, &cfg).unwrap();
    check(&state, &grads, 2, |s| {
        pretrain_loss(&v, &plan, s, &cfg).unwrap()
    });
}

mod heads {
    use super::*;
    use bmmae_core::heads::{
        classify, cls_loss_and_grad, seg_loss_and_grad, surv_loss_and_grad, survival_logits,
        ClsHead, SegHead, SurvHead,
    };
    use bmmae_core::heads::{hazard_nll, seg_loss, segment};
    use bmmae_core::tensor::Tensor;
    use bmmae_core::volume::{crop_label, MultimodalVolume, SurvivalRecord};

    #[derive(Clone)]
    struct Joint<H> {
        model: ModelState<f64>,
        head: H,
    }

    impl<H: Parameters<f64>> Parameters<f64> for Joint<H> {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<f64>)) {
            self.model.visit(&format!("{prefix}model"), f);
            self.head.visit(&format!("{prefix}head"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            self.model.visit_mut(&format!("{prefix}model"), f);
            self.head.visit_mut(&format!("{prefix}head"), f);
        }
    }

    fn patient(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (MultimodalVolume, bmmae_core::volume::CohortRecord) {
        let raw = generate_synthetic_cohort(1, cfg.input_shape, seed, cfg.patch).unwrap();
        (
            preprocess(&raw[0].volume, cfg.input_shape).unwrap(),
            raw[0].clone(),
        )
    }

    #[test]
    fn classification_gradients() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let joint = Joint {
            model: ModelState::init(&cfg, &mut rng).unwrap(),
            head: ClsHead::init(cfg.dim, &mut rng),
        };
        let (v, _) = patient(&cfg, 21);
        let subset = [Modality::T1, Modality::Flair];
        let (_, gm, gh) =
            cls_loss_and_grad(&v, 1, &subset, &joint.model, &joint.head, &cfg).unwrap();
        let grads = Joint {
            model: gm,
            head: gh,
        };
        check(&joint, &grads, 2, |s| {
            let z = classify(&v, &subset, &s.model, &s.head, &cfg).unwrap();
            bmmae_core::heads::bce_with_logits(z, 1.0)
        });
    }

    #[test]
    fn survival_gradients() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let head = SurvHead::init(cfg.dim, vec![1.0, 2.0, 3.0], &mut rng).unwrap();
        let joint = Joint {
            model: ModelState::init(&cfg, &mut rng).unwrap(),
            head,
        };
        let (v, _) = patient(&cfg, 23);
        let subset = [Modality::T2];
        for (interval, event) in [(3, true), (4, false)] {
            let rec = SurvivalRecord {
                time: 2.5,
                event,
                interval: Some(interval),
            };
            let (_, gm, gh) =
                surv_loss_and_grad(&v, &rec, &subset, &joint.model, &joint.head, &cfg).unwrap();
            let grads = Joint {
                model: gm,
                head: gh,
            };
            check(&joint, &grads, 2, |s| {
                let a = survival_logits(&v, &subset, &s.model, &s.head, &cfg).unwrap();
                hazard_nll(&a, interval, event).unwrap()
            });
        }
    }

    #[test]
    fn segmentation_gradients() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let head = SegHead::init(&cfg, 4, &mut rng).unwrap();
        let joint = Joint {
            model: ModelState::init(&cfg, &mut rng).unwrap(),
            head,
        };
        let (v, rec) = patient(&cfg, 25);
        let label = crop_label(rec.seg.as_ref().unwrap(), cfg.input_shape).unwrap();
        let subset = [Modality::T1c, Modality::T2];
        let (_, gm, gh) =
            seg_loss_and_grad(&v, &label, &subset, &joint.model, &joint.head, &cfg).unwrap();
        let grads = Joint {
            model: gm,
            head: gh,
        };
        check(&joint, &grads, 2, |s| {
            let logits = segment(&v, &subset, &s.model, &s.head, &cfg).unwrap();
            seg_loss(&logits, &label).unwrap().0.total
        });
    }
}
