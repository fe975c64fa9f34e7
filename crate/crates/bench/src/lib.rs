//! Fixed inputs for the kernel benchmarks, built from the default synthetic
//! corpus so timings reflect realistic image statistics.

use std::collections::BTreeMap;

use pseudoweight_core::protobank::ClassPrototype;
use pseudoweight_core::segmodel::{SegModel, SegModelConfig, DEFAULT_HIDDEN};
use pseudoweight_core::synthdata::{generate, DatasetSpec, Sample};
use pseudoweight_core::{LabelMap, Tensor3};

pub struct Fixture {
    pub sample: Sample,
    pub model: SegModel,
    pub features: Tensor3,
    pub pseudo: LabelMap,
    pub prototypes: BTreeMap<usize, ClassPrototype>,
}

/// First image of the default corpus, a freshly initialized model, its
/// features, and per-class mean features as prototypes.
pub fn fixture() -> Fixture {
    let spec = DatasetSpec {
        num_images: 1,
        num_val: 0,
        ..DatasetSpec::default()
    };
    let sample = generate(&spec).expect("default spec is valid").train.remove(0);
    let config = SegModelConfig {
        channels: spec.channels,
        hidden: DEFAULT_HIDDEN,
        num_classes: spec.num_classes,
    };
    let model = SegModel::new(config, 0).expect("valid model config");
    let (features, _) = model.forward(&sample.image).expect("image matches model");
    // ground truth as pseudo-labels, so every pixel has a prototype
    let pseudo = sample.mask.clone();

    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &class) in sample.mask.as_slice().iter().enumerate() {
        let f = &features.as_slice()[i * DEFAULT_HIDDEN..(i + 1) * DEFAULT_HIDDEN];
        let entry = sums
            .entry(class as usize)
            .or_insert_with(|| (vec![0.0; DEFAULT_HIDDEN], 0));
        entry.0.iter_mut().zip(f).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(class_id, (sum, n))| {
            let vector = sum.iter().map(|s| s / n as f64).collect::<Vec<_>>().into();
            (
                class_id,
                ClassPrototype {
                    class_id,
                    vector,
                    support: n,
                },
            )
        })
        .collect();
    Fixture {
        sample,
        model,
        features,
        pseudo,
        prototypes,
    }
}
