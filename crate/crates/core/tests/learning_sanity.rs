use hrseg::autograd::{Graph, Mode};
use hrseg::loss::focal_loss;
use hrseg::synth::{generate_dataset, SceneParams, SegmentationSample, Task};
use hrseg::tensor::Tensor;
use hrseg::train::{AdamConfig, AdamState, Model, ModelKind, ModelSpec, TrainConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn scene(seed: u64) -> SegmentationSample {
    generate_dataset(1, 64, 64, seed, &SceneParams::default()).unwrap().samples.remove(0)
}

/// Top-left `side`² window of a sample's image and target.
fn window(s: &SegmentationSample, task: Task, side: usize) -> (Tensor<f32>, Vec<u8>) {
    let x = Tensor::from_fn([1, 3, side, side], |[_, c, y, x]| s.image.at(0, c, y, x));
    let m = task.target(s).crop(0, 0, side, side).unwrap();
    (x, m.data)
}

fn loss_and_step(model: &mut Model, adam: &mut AdamState, x: &Tensor<f32>, t: &[u8], cfg: &TrainConfig, lr: Option<f64>) -> f64 {
    let (loss, grads) = {
        let mut g = Graph::new(&model.store, Mode::Train);
        let xv = g.input(x.clone());
        let y = model.forward(&mut g, xv).unwrap();
        let l = focal_loss(&mut g, y, t, &cfg.loss).unwrap();
        let loss = g.value(l).data()[0] as f64;
        (loss, lr.map(|_| g.backward(l).unwrap()))
    };
    if let (Some(lr), Some(grads)) = (lr, grads) {
        model.store.zero_grads();
        model.store.accumulate(&grads);
        adam.step(&mut model.store, lr).unwrap();
    }
    loss
}

/// Mean loss over the seeds after each of `steps` updates, index 0 is the fresh model.
fn curve(kind: ModelKind, task: Task, side: usize, steps: usize, lr: f64) -> Vec<f64> {
    let mut sums = vec![0.0; steps + 1];
    for seed in SEEDS {
        let s = scene(seed);
        let (x, t) = window(&s, task, side);
        let mut model = Model::new(&ModelSpec::tiny(kind, task.classes()), seed).unwrap();
        let cfg = TrainConfig::new(kind, task, 1, seed);
        let mut adam = AdamState::new(&model.store, AdamConfig::default());
        for (i, sum) in sums.iter_mut().enumerate() {
            let step = (i < steps).then_some(lr);
            *sum += loss_and_step(&mut model, &mut adam, &x, &t, &cfg, step);
        }
    }
    sums.iter().map(|s| s / SEEDS.len() as f64).collect()
}

#[test]
fn one_step_lowers_trsnet_loss() {
    let c = curve(ModelKind::TrsNet, Task::Components, 64, 1, 1e-3);
    assert!(c[1] < c[0], "{c:?}");
}

#[test]
fn one_step_lowers_dmgformer_loss() {
    let c = curve(ModelKind::DmgFormer, Task::Components, 16, 1, 1e-3);
    assert!(c[1] < c[0], "{c:?}");
}

#[test]
fn first_five_steps_never_raise_the_loss() {
    for (kind, side) in [(ModelKind::TrsNet, 64), (ModelKind::DmgFormer, 16)] {
        for task in [Task::Components, Task::CrackRebarSpall] {
            let c = curve(kind, task, side, 5, 1e-3);
            assert!(c.windows(2).all(|w| w[1] <= w[0]), "{kind} {task:?}: {c:?}");
        }
    }
}
