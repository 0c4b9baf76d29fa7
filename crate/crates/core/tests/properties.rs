use crossdiff_core::clda::{fps, knn_partition};
use crossdiff_core::dgtl::{
    conflict_penalty, grad_cosine, task_weight, DgtlConfig, DgtlState, GradSnapshot, Schedule,
    TaskKind,
};
use crossdiff_core::diffattn::{diff_attention, DiffAttnConfig, DiffAttnParams};
use crossdiff_core::geomloss::{dice_loss, iou3d, mask_from_box, Box3D, DICE_EPS};
use crossdiff_core::params::{normal, ParamGroup, ParamStore};
use crossdiff_core::plda::{fuse_multiscale, FusionParams};
use crossdiff_core::{SplitMix64, Tape, Tensor};
use proptest::prelude::*;

fn points(seed: u64, n: usize) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
                rng.uniform(-1.0, 1.0),
            ]
        })
        .collect();
    Tensor::from_points(&pts).unwrap()
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn a_box() -> impl Strategy<Value = Box3D> {
    (
        prop::array::uniform3(-2.0..2.0f64),
        prop::array::uniform3(0.01..2.0f64),
    )
        .prop_map(|(c, s)| Box3D::from_center_size(c, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1..60.0f64) {
        let mut rng = SplitMix64::new(seed);
        let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for r in 0..rows {
            let sum: f64 = v.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn task_weights_never_drop_below_floor(v in prop::collection::vec(-20.0..20.0f64, 5), floor in 0.0..1.0f64) {
        let mut st = DgtlState::new(&DgtlConfig { lambda_floor: floor, ..DgtlConfig::default() }, 100);
        st.v = v.clone();
        for (i, vi) in v.iter().enumerate() {
            let w = task_weight(&st, i);
            prop_assert!(w >= floor);
            prop_assert!(w >= (-vi).exp());
        }
    }

    #[test]
    fn penalty_is_nonnegative_and_vanishes_when_aligned(seed in any::<u64>(), len in 1usize..40, step in 0u64..100) {
        let mut st = DgtlState::new(&DgtlConfig::default(), 100);
        st.step = step;
        let mut rng = SplitMix64::new(seed);
        let snaps: Vec<GradSnapshot> = TaskKind::ALL
            .iter()
            .map(|&task| GradSnapshot { task, grad: (0..len).map(|_| rng.normal()).collect() })
            .collect();
        let p = conflict_penalty(&st, &snaps);
        prop_assert!(p.value >= 0.0);
        prop_assert_eq!(p.pairs.len(), 6);
        let bound = st.eta() * 6.0 * (st.tau + 1.0);
        prop_assert!(p.value <= bound + 1e-12);
        // one shared direction: every cosine is 1
        let shared: Vec<GradSnapshot> = snaps.iter().map(|s| GradSnapshot { task: s.task, grad: snaps[0].grad.clone() }).collect();
        prop_assert_eq!(conflict_penalty(&st, &shared).value, 0.0);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(-5.0..5.0f64, 1..20), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
        let c = grad_cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c, grad_cosine(&b, &a));
    }

    #[test]
    fn schedules_are_monotone(total in 1u64..500, warm in 0.0..1.0f64, decay in 0.01..1.0f64, eta_min in 0.0..0.5f64) {
        let s = Schedule::from_fractions(total, warm, decay, eta_min);
        let mut pz = s.zeta(0);
        let mut pe = s.eta(0);
        for t in 1..=total + 5 {
            let (z, e) = (s.zeta(t), s.eta(t));
            prop_assert!((0.0..=1.0).contains(&z) && z >= pz);
            prop_assert!(e <= pe && e >= eta_min);
            pz = z;
            pe = e;
        }
        prop_assert_eq!(s.zeta(total + 5), 1.0);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in a_box(), b in a_box()) {
        let ab = iou3d(&a, &b);
        prop_assert_eq!(ab, iou3d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_box_mask_agrees_with_containment(b in a_box(), seed in any::<u64>()) {
        let pts = points(seed, 30);
        let m = mask_from_box(&b, &pts, 20.0);
        for (i, &p) in m.probs.iter().enumerate() {
            let r = pts.row(i);
            prop_assert!((0.0..=1.0).contains(&p));
            if b.contains([r[0], r[1], r[2]]) {
                prop_assert!(p >= 0.5);
            } else {
                prop_assert!(p <= 0.5);
            }
        }
    }

    #[test]
    fn dice_is_bounded(p in prop::collection::vec(0.0..1.0f64, 1..30), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let t: Vec<f64> = p.iter().map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
        let d = dice_loss(&p, &t, DICE_EPS).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn fps_matches_brute_force(seed in any::<u64>(), n in 2usize..40, m_frac in 0.0..1.0f64) {
        let pts = points(seed, n);
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let got = fps(&pts, m, 0).unwrap();
        let mut want = vec![0usize];
        while want.len() < m {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..n {
                let d = want.iter().map(|&s| d2(pts.row(i), pts.row(s))).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            want.push(best.1);
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 4usize..40, s in 1usize..4) {
        let pts = points(seed, n);
        let centres: Vec<usize> = (0..n).step_by(3).collect();
        let a = knn_partition(&pts, &centres, s).unwrap();
        for (ci, &c) in centres.iter().enumerate() {
            let mut all: Vec<usize> = (0..n).collect();
            all.sort_by(|&x, &y| d2(pts.row(x), pts.row(c)).total_cmp(&d2(pts.row(y), pts.row(c))).then(x.cmp(&y)));
            prop_assert_eq!(&a.members[ci][..], &all[..s]);
        }
    }

    #[test]
    fn tied_channels_with_unit_lambda_cancel(seed in any::<u64>(), nh in 1usize..3, dh in 1usize..4, m in 1usize..5, n in 1usize..6) {
        let d = 2 * nh * dh;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let p = DiffAttnParams::new(&mut store, "a", DiffAttnConfig::new(d, nh), ParamGroup::Rest, &mut rng).unwrap();
        // copy each head's first channel columns into its second channel
        for id in [p.w_q, p.w_k] {
            let mut w = store.get(id).clone();
            for r in 0..d {
                for h in 0..nh {
                    for c in 0..dh {
                        let v = w.row(r)[2 * h * dh + c];
                        w.data_mut()[r * d + (2 * h + 1) * dh + c] = v;
                    }
                }
            }
            store.set(id, w).unwrap();
        }
        // exp(0) - exp(clamped -50) rounds to exactly 1
        store.set(p.lambda_q1, Tensor::zeros([nh, dh])).unwrap();
        store.set(p.lambda_q2, Tensor::full([nh, dh], 50.0)).unwrap();
        store.set(p.lambda_k2, Tensor::full([nh, dh], -1.0)).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind_frozen(&mut tape);
        let xq = tape.constant(normal(&mut rng, &[m, d], 1.0));
        let xkv = tape.constant(normal(&mut rng, &[n, d], 1.0));
        let o = diff_attention(&mut tape, &bind, xq, xkv, &p).unwrap();
        prop_assert!(tape.value(o.lambda).data().iter().all(|&l| l == 1.0));
        for h in &o.head_outputs {
            prop_assert!(tape.value(*h).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn fusion_is_permutation_equivariant(seed in any::<u64>()) {
        let (n4, n3, n2, d) = (2, 4, 8, 3);
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let fp = FusionParams::new(&mut store, "f", d, d, d, d, &mut rng).unwrap();
        let mk = |rng: &mut SplitMix64, r: usize| Tensor::new([r, d], (0..r * d).map(|_| rng.normal()).collect()).unwrap();
        let (k, f3, f2) = (mk(&mut rng, n4), mk(&mut rng, n3), mk(&mut rng, n2));
        let parent3: Vec<usize> = (0..n3).map(|_| rng.below(n4)).collect();
        let parent2: Vec<usize> = (0..n2).map(|_| rng.below(n3)).collect();
        let mut perm: Vec<usize> = (0..n2).collect();
        rng.shuffle(&mut perm);

        let run = |f2: Tensor, parent2: &[usize]| {
            let mut tape = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let (kv, f3v, f2v) = (tape.constant(k.clone()), tape.constant(f3.clone()), tape.constant(f2));
            let out = fuse_multiscale(&mut tape, &bind, kv, f3v, f2v, &parent3, parent2, &fp).unwrap();
            tape.value(out).clone()
        };
        let base = run(f2.clone(), &parent2);
        let pf2 = Tensor::new([n2, d], perm.iter().flat_map(|&i| f2.row(i).to_vec()).collect()).unwrap();
        let pparent: Vec<usize> = perm.iter().map(|&i| parent2[i]).collect();
        let permuted = run(pf2, &pparent);
        for (r, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.row(r), base.row(i));
        }
    }
}

#[test]
fn tape_results_are_bitwise_reproducible() {
    let run = || {
        let x = points(3, 50);
        let mut tape = Tape::new();
        let a = tape.leaf(x.with_grad());
        let t = tape.transpose(a).unwrap();
        let g = tape.matmul(a, t).unwrap();
        let s = tape.softmax_rows(g).unwrap();
        let l = tape.sum(s).unwrap();
        let l = tape.exp(l).unwrap();
        let grads = tape.backward(l).unwrap();
        (tape.value(s).clone(), grads.get(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}
