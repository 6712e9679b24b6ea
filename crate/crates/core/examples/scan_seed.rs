use sharpopt_core::model::{Activation, Batch, MlpSpec, Model, OutputHead, PassCounters, Targets};
use sharpopt_core::rng::Rng;
use sharpopt_core::tensor::Tensor;

fn main() {
    let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
    let w = spec.init_params(&mut Rng::new(11));
    let inputs = Tensor::new(
        vec![2, 3],
        vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5],
    )
    .unwrap();
    let batch = Batch::new(inputs, Targets::Classes(vec![0, 1]), vec![0, 1]).unwrap();
    let model = Model::from(spec);
    let mut c = PassCounters::default();
    let l = model.per_instance_losses(&w, &batch, false, &mut c).unwrap();
    println!("losses = {:?}", l.values());
    for v in l.values() { println!("exact: {v}"); }
}
