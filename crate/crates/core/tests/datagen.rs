use std::collections::BTreeMap;

use madiff_core::datagen::{
    editing_region, gen_eval_set, gen_training_set, parse_caption, render, Collar, Color,
    GarmentKind, GarmentSpec, SleeveLength, TaskType, MAX_JITTER, SIZE,
};
use madiff_core::io::{load_mask_examples, load_tasks, read_meta, write_dataset, Split};
use madiff_core::masknet::EditMask;
use madiff_core::prompt::PromptEncoder;
use madiff_core::rng::rng_for;
use madiff_core::tensor::Grid;
use rand::Rng as _;

fn random_specs(n: usize, seed: u64) -> Vec<(GarmentSpec, u64)> {
    let mut rng = rng_for(seed, "test/specs");
    (0..n)
        .map(|_| {
            let kind = GarmentKind::ALL[rng.gen_range(0..3)];
            (GarmentSpec::random(&mut rng, kind), rng.gen())
        })
        .collect()
}

fn foreground_mask(g: &Grid) -> EditMask {
    EditMask::binary(g.clone())
}

#[test]
fn captions_parse_back_and_masks_nest() {
    for (spec, body) in random_specs(1000, 1) {
        let s = render(&spec, body).unwrap();
        assert_eq!(parse_caption(s.caption.raw()).unwrap(), spec);
        assert!(s.cloth_mask.is_subset_of(&foreground_mask(&s.foreground)));
        assert_eq!(render(&spec, body).unwrap(), s);
        let mut recolored = spec;
        recolored.color = Color::ALL
            .iter()
            .copied()
            .find(|c| *c != spec.color)
            .unwrap();
        assert_eq!(
            editing_region(&spec, &recolored, s.jitter).unwrap(),
            s.cloth_mask
        );
    }
}

#[test]
fn grammar_is_closed() {
    let all = GarmentSpec::all();
    assert_eq!(all.len(), 2 * (7 * 3 * 2 * 3) + 7 * 3);
    for spec in &all {
        assert_eq!(parse_caption(&spec.caption()).unwrap(), *spec);
        assert_eq!(spec.to_string().parse::<GarmentSpec>().unwrap(), *spec);
    }
}

#[test]
fn regions_cover_both_garments_on_shape_changes() {
    for (spec, body) in random_specs(300, 2) {
        if !spec.kind.has_top() {
            continue;
        }
        let src = render(&spec, body).unwrap();
        for sleeve in SleeveLength::ALL {
            if *sleeve == spec.sleeve {
                continue;
            }
            let tgt_spec = GarmentSpec {
                sleeve: *sleeve,
                ..spec
            };
            let tgt = render(&tgt_spec, body).unwrap();
            let region = editing_region(&spec, &tgt_spec, src.jitter).unwrap();
            assert!(tgt.cloth_mask.is_subset_of(&region));
            let sym = Grid::from_fn(SIZE, SIZE, |y, x| {
                ((src.cloth_mask.get(y, x) > 0.0) != (tgt.cloth_mask.get(y, x) > 0.0)) as u8 as f64
            });
            assert!(EditMask::binary(sym).is_subset_of(&region));
            assert!(region.is_subset_of(&foreground_mask(&src.foreground)));

            let both = GarmentSpec {
                color: Color::ALL
                    .iter()
                    .copied()
                    .find(|c| *c != spec.color)
                    .unwrap(),
                ..tgt_spec
            };
            let union = src.cloth_mask.union(&tgt.cloth_mask);
            assert_eq!(editing_region(&spec, &both, src.jitter).unwrap(), union);
        }
        assert!(editing_region(&spec, &spec, 0).is_err());
    }
}

#[test]
fn training_marginals_are_near_uniform() {
    let enc = PromptEncoder::default();
    let set = gen_training_set(1000, 5, &enc).unwrap();
    assert!(set.iter().all(|t| t.target.area() > 0));
    let freq = |key: &dyn Fn(&GarmentSpec) -> String, n: usize| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for t in &set {
            *m.entry(key(&t.source)).or_default() += 1;
        }
        assert_eq!(m.len(), n, "{m:?}");
        for (k, c) in &m {
            let f = *c as f64 / set.len() as f64;
            assert!((f - 1.0 / n as f64).abs() <= 0.05, "{k}: {f}");
        }
    };
    freq(&|s| s.kind.to_string(), 3);
    freq(&|s| s.color.to_string(), 7);
    freq(&|s| s.pattern.to_string(), 3);
    let tops: Vec<_> = set.iter().filter(|t| t.source.kind.has_top()).collect();
    for sleeve in SleeveLength::ALL {
        let f =
            tops.iter().filter(|t| t.source.sleeve == *sleeve).count() as f64 / tops.len() as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.05, "{sleeve}: {f}");
    }
    for collar in Collar::ALL {
        let f =
            tops.iter().filter(|t| t.source.collar == *collar).count() as f64 / tops.len() as f64;
        assert!((f - 0.5).abs() <= 0.05, "{collar}: {f}");
    }
    assert!(set.iter().all(|t| t.jitter.abs() <= MAX_JITTER));
    assert_eq!(gen_training_set(1, 5, &enc).unwrap()[0], set[0]);
}

#[test]
fn eval_sets_are_balanced_and_truthful() {
    let tasks = gen_eval_set(5, 3).unwrap();
    assert_eq!(tasks.len(), 20);
    for t in TaskType::ALL {
        assert_eq!(tasks.iter().filter(|x| x.task_type == t).count(), 5);
    }
    for t in &tasks {
        assert_eq!(parse_caption(t.target_prompt.raw()).unwrap(), t.truth.spec);
        if t.task_type == TaskType::Color {
            assert_eq!(
                t.truth.changed,
                vec![madiff_core::datagen::Attribute::Color]
            );
        }
        if t.task_type == TaskType::Material {
            assert_ne!(t.input.spec.pattern, t.truth.spec.pattern);
        }
    }
    assert_eq!(gen_eval_set(5, 3).unwrap(), tasks);
    assert!(tasks.windows(2).all(|w| w[0].id < w[1].id));
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let enc = PromptEncoder::default();
    let train = gen_training_set(12, 8, &enc).unwrap();
    let tasks = gen_eval_set(2, 8).unwrap();
    write_dataset(dir.path(), &train, &tasks).unwrap();

    let meta = read_meta(dir.path()).unwrap();
    assert_eq!(meta.len(), 12 + 8);
    assert_eq!(load_tasks(dir.path()).unwrap(), tasks);
    let ex = load_mask_examples(dir.path(), Split::Train, &enc).unwrap();
    assert_eq!(ex.len(), 12);
    for ((input, mask), t) in ex.iter().zip(&train) {
        assert_eq!(input, &t.input);
        assert_eq!(mask, &t.target);
    }
    let first = std::fs::read(dir.path().join("meta.jsonl")).unwrap();
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &train, &tasks).unwrap();
    assert_eq!(
        std::fs::read(again.path().join("meta.jsonl")).unwrap(),
        first
    );
}
