//! Randomized invariant checks over the library's core contracts:
//! probability-simplex outputs, schedule monotonicity, layout coverage,
//! routed-attention isolation, grammar roundtrips, mask exactness,
//! archive bit preservation, and config override behavior.

use proptest::prelude::*;
use spritediff_core::attention::{cross_attention, sdca, AttnProjections};
use spritediff_core::checkpoint::Archive;
use spritediff_core::config::ExperimentConfig;
use spritediff_core::diffusion::{make_schedule, sample_timesteps};
use spritediff_core::layout::{Region, RegionLayout};
use spritediff_core::rng::{RngStream, Stream};
use spritediff_core::scene::{ActionSpec, ScenePlacement, SceneSpec, SubjectSpec};
use spritediff_core::text::{
    parse_prompt, ActionWord, BackgroundWord, PromptAst, RareId, ShapeWord, SubjectClause,
};
use spritediff_core::{Graph, Tensor};
use std::collections::BTreeMap;

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn normal_tensor(seed: u64, index: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = RngStream::item(seed, Stream::Init, index);
    Tensor::new(rng.fill_normal(n), shape).expect("consistent shape")
}

/// Paths at which two JSON trees disagree, in pointer notation.
fn json_diff(a: &serde_json::Value, b: &serde_json::Value, at: &str, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) if x.len() == y.len() => {
            for (k, va) in x {
                match y.get(k) {
                    Some(vb) => json_diff(va, vb, &format!("{at}/{k}"), out),
                    None => out.push(format!("{at}/{k}")),
                }
            }
        }
        _ if a == b => {}
        _ => out.push(at.to_string()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        m in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
        shift in -8.0f32..8.0,
        row in 0usize..6,
    ) {
        let row = row % m;
        let mut rng = RngStream::new(seed, Stream::Init);
        let logits = rng.fill_uniform(m * n, -15.0, 15.0);
        let x = Tensor::new(logits.clone(), &[m, n]).unwrap();
        let mut g = Graph::inference();
        let p = g.softmax_last(&x).unwrap();
        for r in 0..m {
            let row_vals = &p.data()[r * n..(r + 1) * n];
            let sum: f32 = row_vals.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-4);
            prop_assert!(row_vals.iter().all(|&v| v >= 0.0));
        }
        let mut shifted = logits;
        for v in &mut shifted[row * n..(row + 1) * n] {
            *v += shift;
        }
        let x2 = Tensor::new(shifted, &[m, n]).unwrap();
        let p2 = g.softmax_last(&x2).unwrap();
        for r in 0..m {
            let a = &p.data()[r * n..(r + 1) * n];
            let b = &p2.data()[r * n..(r + 1) * n];
            if r == row {
                for (u, v) in a.iter().zip(b) {
                    prop_assert!((u - v).abs() < 1e-5);
                }
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn signal_fraction_decreases_strictly_inside_unit_interval(
        t_max in 1usize..300,
        beta_start in 1e-5f64..0.05,
        spread in 0.0f64..0.03,
    ) {
        let s = make_schedule(t_max, beta_start, beta_start + spread).unwrap();
        prop_assert_eq!(s.alpha_bar.len(), t_max);
        prop_assert!((s.alpha_bar_at(0).unwrap() - 1.0).abs() == 0.0);
        let mut prev = 1.0f64;
        for t in 1..=t_max {
            let ab = s.alpha_bar_at(t).unwrap();
            prop_assert!(ab > 0.0 && ab < 1.0);
            prop_assert!(ab < prev);
            prev = ab;
        }
    }

    #[test]
    fn sampler_grids_ascend_and_end_at_t_max(
        (t_max, steps) in (1usize..2000).prop_flat_map(|t| (Just(t), 1..=t)),
    ) {
        let grid = sample_timesteps(t_max, steps).unwrap();
        prop_assert_eq!(grid.len(), steps);
        prop_assert_eq!(*grid.last().unwrap(), t_max);
        prop_assert!(grid[0] >= 1);
        prop_assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn seeded_streams_reproduce_and_separate(seed in any::<u64>(), index in 0u64..1000) {
        let draws = |mut r: RngStream| (0..8).map(|_| r.next_u64()).collect::<Vec<_>>();
        prop_assert_eq!(
            draws(RngStream::new(seed, Stream::Data)),
            draws(RngStream::new(seed, Stream::Data))
        );
        prop_assert_ne!(
            draws(RngStream::new(seed, Stream::Data)),
            draws(RngStream::new(seed, Stream::Noise))
        );
        prop_assert_ne!(
            draws(RngStream::item(seed, Stream::Mix, index)),
            draws(RngStream::item(seed, Stream::Mix, index + 1))
        );
    }

    #[test]
    fn overrides_change_exactly_the_named_field(key_idx in 0usize..6, value in 1u64..=16) {
        let keys = [
            "seed",
            "sampler.steps",
            "finetune.iterations",
            "finetune.rank",
            "pretrain.image_steps",
            "corpus.items",
        ];
        let key = keys[key_idx];
        let base = ExperimentConfig::bench();
        let over = base
            .with_overrides(&[(key.to_string(), value.to_string())])
            .unwrap();
        let va = serde_json::to_value(&base).unwrap();
        let vb = serde_json::to_value(&over).unwrap();
        let pointer = format!("/{}", key.replace('.', "/"));
        prop_assert_eq!(vb.pointer(&pointer).and_then(|v| v.as_u64()), Some(value));
        let mut changed = Vec::new();
        json_diff(&va, &vb, "", &mut changed);
        if va.pointer(&pointer).and_then(|v| v.as_u64()) == Some(value) {
            prop_assert!(changed.is_empty());
            prop_assert_eq!(base.hash(), over.hash());
        } else {
            prop_assert_eq!(changed, vec![pointer]);
            prop_assert_ne!(base.hash(), over.hash());
        }
        let twice = over
            .with_overrides(&[(key.to_string(), value.to_string())])
            .unwrap();
        prop_assert_eq!(twice.hash(), over.hash());
        prop_assert!(base
            .with_overrides(&[("corpus.depth".to_string(), value.to_string())])
            .is_err());
    }
}

fn arb_layout() -> impl Strategy<Value = RegionLayout> {
    let region = (
        0.0f32..0.9,
        0.0f32..0.9,
        0.05f32..1.0,
        0.05f32..1.0,
        0usize..4,
    );
    (proptest::collection::vec(region, 1..4), 0usize..4).prop_map(|(raw, bg)| RegionLayout {
        regions: raw
            .into_iter()
            .enumerate()
            .map(|(i, (x0, y0, dw, dh, slot))| Region {
                rect: [x0, y0, (x0 + dw).min(1.0), (y0 + dh).min(1.0)],
                slot,
                priority: i as i32,
            })
            .collect(),
        background_slot: Some(bg),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rasterization_matches_a_direct_cell_model(
        layout in arb_layout(),
        h in 1usize..20,
        w in 1usize..20,
    ) {
        let map = layout.rasterize(h, w).unwrap();
        prop_assert_eq!(map.len(), h * w);
        prop_assert_eq!(&map, &layout.rasterize(h, w).unwrap());
        // A cell belongs to a region exactly when the region's span of
        // whole cells includes it (edges within 1e-4 of a boundary sit
        // on it); the highest covering priority wins, uncovered cells
        // fall back to the background slot.
        let edge = |p: f64| {
            let r = p.round();
            if (p - r).abs() < 1e-4 {
                r
            } else {
                p
            }
        };
        for y in 0..h {
            for x in 0..w {
                let winner = layout
                    .regions
                    .iter()
                    .filter(|r| {
                        let covers_x = edge(r.rect[0] as f64 * w as f64) <= x as f64
                            && (x as f64) < edge(r.rect[2] as f64 * w as f64);
                        let covers_y = edge(r.rect[1] as f64 * h as f64) <= y as f64
                            && (y as f64) < edge(r.rect[3] as f64 * h as f64);
                        covers_x && covers_y
                    })
                    .max_by_key(|r| r.priority);
                let expect = winner
                    .map(|r| r.slot)
                    .unwrap_or_else(|| layout.background_slot.unwrap());
                prop_assert_eq!(map[y * w + x], expect);
            }
        }
    }

    #[test]
    fn uniform_strips_stay_sorted_within_rows(
        n in 1usize..=8,
        h in 1usize..=24,
        w in 1usize..=24,
    ) {
        let map = RegionLayout::uniform(n).unwrap().rasterize(h, w).unwrap();
        for y in 0..h {
            let row = &map[y * w..(y + 1) * w];
            prop_assert!(row.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(row.iter().all(|&s| s < n));
        }
        if w >= n {
            let mut seen = vec![false; n];
            for &s in &map {
                seen[s] = true;
            }
            prop_assert!(seen.into_iter().all(|b| b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_slot_routing_is_plain_attention(
        seed in any::<u64>(),
        d_model in prop::sample::select(vec![8usize, 16]),
        l in 1usize..4,
        h in 2usize..5,
        w_cells in 2usize..5,
    ) {
        let mut rng = RngStream::new(seed, Stream::Init);
        let proj = AttnProjections::init(d_model, 32, d_model, &mut rng);
        let q = normal_tensor(seed, 1, &[h * w_cells, d_model]);
        let text = normal_tensor(seed, 2, &[l, 32]);
        let layout = RegionLayout::uniform(1).unwrap();
        let mut g = Graph::inference();
        let plain = cross_attention(&mut g, &q, &text, &proj).unwrap();
        let routed = sdca(&mut g, &q, &[&text], &layout, h, w_cells, &proj).unwrap();
        prop_assert_eq!(bits(&plain), bits(&routed));
    }

    #[test]
    fn routed_text_edits_stay_inside_their_region(
        seed in any::<u64>(),
        n in 2usize..=4,
        pick in 0usize..4,
        h in 2usize..6,
        w_cells in 2usize..6,
    ) {
        let slot = pick % n;
        let d_model = 8;
        let mut rng = RngStream::new(seed, Stream::Init);
        let proj = AttnProjections::init(d_model, 16, d_model, &mut rng);
        let q = normal_tensor(seed, 1, &[h * w_cells, d_model]);
        let texts: Vec<Tensor> = (0..n).map(|i| normal_tensor(seed, 10 + i as u64, &[3, 16])).collect();
        let mut edited = texts.clone();
        edited[slot] = normal_tensor(seed, 99, &[3, 16]);
        let layout = RegionLayout::uniform(n).unwrap();
        let map = layout.rasterize(h, w_cells).unwrap();
        let mut g = Graph::inference();
        let refs: Vec<&Tensor> = texts.iter().collect();
        let erefs: Vec<&Tensor> = edited.iter().collect();
        let a = sdca(&mut g, &q, &refs, &layout, h, w_cells, &proj).unwrap();
        let b = sdca(&mut g, &q, &erefs, &layout, h, w_cells, &proj).unwrap();
        for (cell, &owner) in map.iter().enumerate() {
            if owner != slot {
                let ra = &a.data()[cell * d_model..(cell + 1) * d_model];
                let rb = &b.data()[cell * d_model..(cell + 1) * d_model];
                prop_assert_eq!(ra, rb, "cell {} owned by slot {} moved", cell, owner);
            }
        }
    }
}

fn arb_prompt() -> impl Strategy<Value = PromptAst> {
    (
        0usize..4,
        proptest::sample::subsequence(vec![1u8, 2, 3, 4, 5, 6, 7, 8], 4),
        proptest::collection::vec(any::<bool>(), 4),
        proptest::collection::vec(0usize..4, 4),
        proptest::collection::vec(proptest::option::of(0usize..6), 4),
        proptest::option::of(0usize..4),
    )
        .prop_map(|(n, ids, with_id, shapes, actions, bg)| {
            let clauses: Vec<SubjectClause> = (0..n)
                .map(|k| SubjectClause {
                    identity: with_id[k]
                        .then(|| RareId::new(ids[k]).expect("ids drawn from 1..=8")),
                    shape: ShapeWord::ALL[shapes[k]],
                    action: actions[k].map(|a| ActionWord::ALL[a]),
                })
                .collect();
            let background = if clauses.is_empty() {
                Some(BackgroundWord::ALL[bg.unwrap_or(0)])
            } else {
                bg.map(|b| BackgroundWord::ALL[b])
            };
            PromptAst { clauses, background }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn prompt_text_roundtrips_through_the_parser(ast in arb_prompt()) {
        let text = ast.render();
        let back = parse_prompt(&text).unwrap();
        prop_assert_eq!(back, ast);
    }
}

fn arb_scene() -> impl Strategy<Value = SceneSpec> {
    const LEFT: [ActionWord; 4] = [
        ActionWord::SlideRight,
        ActionWord::Still,
        ActionWord::Spin,
        ActionWord::Grow,
    ];
    const RIGHT: [ActionWord; 4] = [
        ActionWord::SlideLeft,
        ActionWord::Still,
        ActionWord::Spin,
        ActionWord::Bounce,
    ];
    const PALETTE: [[u8; 3]; 6] = [
        [220, 50, 47],
        [38, 139, 210],
        [64, 180, 80],
        [240, 200, 40],
        [250, 250, 250],
        [30, 30, 30],
    ];
    (
        2usize..=4,
        1usize..=2,
        proptest::collection::vec((0usize..4, 0usize..6, 0usize..5, 0.2f32..0.3, 0usize..4), 2),
        0usize..4,
    )
        .prop_map(|(frames, n_subj, subj, bg)| {
            let (h, w) = (20, 24);
            let placements = (0..n_subj)
                .map(|k| {
                    let (shape, base, accent_off, size, act) = subj[k];
                    let actions = if k == 0 { &LEFT } else { &RIGHT };
                    ScenePlacement {
                        subject: SubjectSpec {
                            shape: ShapeWord::ALL[shape],
                            base_color: PALETTE[base],
                            accent_color: PALETTE[(base + 1 + accent_off) % PALETTE.len()],
                            size,
                            identity: Some(RareId::new(k as u8 + 1).expect("1 or 2")),
                        },
                        action: ActionSpec::standard(actions[act], w),
                        start: if k == 0 { (5.0, 10.0) } else { (19.0, 10.0) },
                    }
                })
                .collect();
            SceneSpec {
                placements,
                background: BackgroundWord::ALL[bg],
                frames,
                height: h,
                width: w,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rendered_scenes_have_exact_disjoint_masks(spec in arb_scene()) {
        let sample = spec.render_video().unwrap();
        let (f, h, w) = (spec.frames, spec.height, spec.width);
        prop_assert_eq!(sample.frames.shape(), &[f, 3, h, w]);
        prop_assert!(sample.frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for frame_masks in &sample.masks {
            prop_assert_eq!(frame_masks.len(), spec.placements.len());
            for px in 0..h * w {
                let mut owners = 0;
                for m in frame_masks {
                    let v = m.data()[px];
                    prop_assert!(v == 0.0 || v == 1.0);
                    owners += (v == 1.0) as usize;
                }
                prop_assert!(owners <= 1);
            }
        }
        let ast = parse_prompt(&sample.caption).unwrap();
        prop_assert_eq!(ast.clauses.len(), spec.placements.len());
    }

    #[test]
    fn archives_roundtrip_bit_exact(
        tensors in proptest::collection::btree_map(
            "[a-z]{1,8}",
            proptest::collection::vec(any::<f32>(), 1..40),
            1..4,
        ),
        meta in proptest::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,12}", 0..4),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut ar = Archive::new();
        ar.meta = meta.clone();
        let mut expect = BTreeMap::new();
        for (name, data) in &tensors {
            let t = Tensor::new(data.clone(), &[data.len()]).unwrap();
            ar.put(name, &t);
            expect.insert(name.clone(), bits(&t));
        }
        ar.save(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        prop_assert_eq!(&back.meta, &meta);
        prop_assert_eq!(back.len(), expect.len());
        for (name, want) in &expect {
            let got = back.get(name).unwrap();
            prop_assert_eq!(got.shape(), &[want.len()]);
            prop_assert_eq!(&bits(got), want);
        }
    }
}
