//! Full-pipeline gradient verification: analytic gradients of the total
//! loss against central finite differences, every parameter element, on a
//! tiny configuration at 64-bit precision.

mod common;

use ndarray::Array2;
use p2p_core::data::{make_roi, make_targets, Annotation};
use p2p_core::geom::PrimitiveKind;
use p2p_core::model::Model;
use p2p_core::nn::Tape;
use p2p_core::train::{compute_match, losses_with_match, MatchResult, TrainConfig};

struct Probe {
    model: Model,
    image: Array2<f64>,
    roi: p2p_core::data::RoiSpec,
    target: p2p_core::data::TrainingTarget,
    cfg: TrainConfig,
    mres: MatchResult,
}

impl Probe {
    fn new() -> Self {
        let cfg = TrainConfig::default();
        let model = Model::new(common::tiny_model_cfg(PrimitiveKind::Corner), 20260501).unwrap();

        // A small L-shaped building inside a 32x32 image with a textured
        // fill, so every backbone weight sees a non-trivial gradient.
        let ring = p2p_core::geom::normalize_ring(&[
            p2p_core::geom::Point2::new(7.3, 6.1),
            p2p_core::geom::Point2::new(24.8, 6.9),
            p2p_core::geom::Point2::new(24.1, 16.4),
            p2p_core::geom::Point2::new(16.2, 16.9),
            p2p_core::geom::Point2::new(15.7, 25.2),
            p2p_core::geom::Point2::new(6.9, 24.6),
        ])
        .unwrap();
        let mask = p2p_core::eval::rasterize(&ring, 32, 32);
        let image = Array2::from_shape_fn((32, 32), |(y, x)| {
            let base = if mask.data[y * 32 + x] { 0.78 } else { 0.22 };
            base + ((x * 13 + y * 7) % 17) as f64 / 200.0
        });
        let ann = Annotation::from_ring(ring);

        let roi = make_roi(&ann.bbox, 1.1, None, 32.0, 32.0).unwrap();
        let target = make_targets(&ann, &roi, model.cfg.kind, model.cfg.order_classes).unwrap();

        // Fix the match from the base parameters.
        let mut tape = Tape::new(&model.params);
        let feature = model.backbone_on_tape(&mut tape, &image).unwrap();
        let fwd = model.decode_roi(&mut tape, feature, &roi).unwrap();
        let mres = compute_match(&model, &tape, &fwd, &target, &cfg).unwrap();

        // Guard the L1 kinks: every matched coordinate must sit further than
        // the FD step from its target.
        let coords = tape.value2(fwd.coords);
        for i in 0..coords.nrows() {
            if !mres.is_matched(i) {
                continue;
            }
            for k in 0..coords.ncols() {
                let diff = (coords[[i, k]] - target.coords[[mres.sigma[i], k]]).abs();
                assert!(diff > 1e-4, "coordinate {i},{k} too close to an L1 kink: {diff}");
            }
        }
        Self { model, image, roi, target, cfg, mres }
    }

    fn loss(&self) -> f64 {
        let mut tape = Tape::new(&self.model.params);
        let feature = self.model.backbone_on_tape(&mut tape, &self.image).unwrap();
        let fwd = self.model.decode_roi(&mut tape, feature, &self.roi).unwrap();
        let (loss, _) = losses_with_match(&mut tape, &fwd, &self.target, &self.mres, &self.cfg).unwrap();
        tape.scalar(loss)
    }

    fn analytic_grads(&self) -> Vec<Option<ndarray::ArrayD<f64>>> {
        let mut tape = Tape::new(&self.model.params);
        let feature = self.model.backbone_on_tape(&mut tape, &self.image).unwrap();
        let fwd = self.model.decode_roi(&mut tape, feature, &self.roi).unwrap();
        let (loss, _) = losses_with_match(&mut tape, &fwd, &self.target, &self.mres, &self.cfg).unwrap();
        tape.backward(loss)
    }
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let mut probe = Probe::new();
    let grads = probe.analytic_grads();
    let h = 1e-4;
    let ids: Vec<_> = probe.model.params.ids().collect();

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for id in ids {
        let name = probe.model.params.name(id).to_string();
        let len = probe.model.params.value(id).len();
        let zero = ndarray::ArrayD::zeros(probe.model.params.value(id).raw_dim());
        let g = grads[id.0].as_ref().unwrap_or(&zero).clone();
        let gslice = g.as_slice().expect("gradient is contiguous").to_vec();
        for e in 0..len {
            let orig = probe.model.params.value(id).as_slice().unwrap()[e];
            let mut eval_at = |delta: f64| {
                probe.model.params.value_mut(id).as_slice_mut().unwrap()[e] = orig + delta;
                probe.loss()
            };
            // Fourth-order central difference keeps truncation error below
            // the 1e-4 relative budget even for small gradients.
            let f1 = eval_at(h);
            let f2 = eval_at(2.0 * h);
            let fm1 = eval_at(-h);
            let fm2 = eval_at(-2.0 * h);
            probe.model.params.value_mut(id).as_slice_mut().unwrap()[e] = orig;
            let fd = (-f2 + 8.0 * f1 - 8.0 * fm1 + fm2) / (12.0 * h);
            let an = gslice[e];
            let denom = an.abs().max(fd.abs());
            let err = (an - fd).abs();
            assert!(
                err <= 1e-9 + 1e-4 * denom,
                "{name}[{e}]: analytic {an} vs fd {fd} (err {err})"
            );
            if denom > 1e-6 {
                max_rel = max_rel.max(err / denom);
            }
            checked += 1;
        }
    }
    println!("checked {checked} parameter elements, max relative error {max_rel:.3e}");
    assert!(max_rel < 1e-4);
}
