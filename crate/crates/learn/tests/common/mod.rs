#![allow(dead_code)]

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use workbench_core::glyphs::render;
use workbench_core::{ClassId, Image};
use workbench_learn::LabeledImage;

pub fn glyphs(n: usize, classes: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % classes;
            let image: Image = render(class, 32, &mut rng);
            LabeledImage {
                id: format!("g{i:04}"),
                label: ClassId::from(class),
                image,
            }
        })
        .collect()
}

pub fn values(var: &Var) -> Vec<f64> {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn set_values(var: &Var, values: Vec<f64>) {
    let t = Tensor::from_vec(values, var.shape(), var.device()).unwrap();
    var.set(&t).unwrap();
}

/// Central difference of `f` along coordinate `index` of `var`.
pub fn central_difference(var: &Var, index: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let base = values(var);
    let mut plus = base.clone();
    plus[index] += h;
    set_values(var, plus);
    let fp = f();
    let mut minus = base.clone();
    minus[index] -= h;
    set_values(var, minus);
    let fm = f();
    set_values(var, base);
    (fp - fm) / (2.0 * h)
}
