mod common;

use common::oracle::*;
use common::*;
use d2stream::attention::AttentionConfig;
use d2stream::dual_stream::{
    cross_interact, dual_forward, speaker_stream, temporal_stream, DualStreamStack, StreamToggles,
};
use d2stream::model::ModelConfig;
use d2stream::{Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;

const D: usize = 8;

fn stack(rounds: usize, max_speakers: usize, seed: u64) -> (ParamStore, DualStreamStack) {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(D, 2).unwrap();
    let st = DualStreamStack::new(
        &mut store,
        cfg,
        rounds,
        max_speakers,
        StreamToggles::default(),
        &mut rng(seed),
    )
    .unwrap();
    randomize(&mut store, seed + 1);
    (store, st)
}

fn zero_embedding(store: &mut ParamStore, st: &DualStreamStack) {
    let shape = store.value(st.embedding.table).shape().to_vec();
    store.get_mut(st.embedding.table).value = Tensor::zeros(&shape);
}

fn scores(store: &ParamStore, st: &DualStreamStack, x: &Tensor) -> d2stream::Result<Tensor> {
    let mut g = Graph::new(store);
    let v = g.input(x.clone());
    let out = dual_forward(&mut g, v, st)?;
    Ok(g.value(out.scores).clone())
}

fn permute_speakers(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.len() / t.shape()[0];
    let data: Vec<f64> = perm
        .iter()
        .flat_map(|&p| t.data()[p * n..(p + 1) * n].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// `[S][T][D]` nested rows.
fn nested(t: &Tensor) -> Vec<Rows> {
    let s = t.shape()[0];
    let t3 = t.reshape(&[s, t.shape()[1], t.shape()[2]]).unwrap();
    (0..s).map(|i| rows(&t3, i)).collect()
}

/// Rounds of speaker SAL, temporal SAL and the two cross-attention layers,
/// evaluated with plain loops, then the sum of streams through the head.
fn dual_oracle(store: &ParamStore, st: &DualStreamStack, x: &Tensor) -> Vec<Vec<f64>> {
    let x = nested(x);
    let (s, t) = (x.len(), x[0].len());
    let table = store.value(st.embedding.table);
    let mut time_in = x.clone();
    let mut sub_in = x;
    for (r, round) in st.rounds.iter().enumerate() {
        let mut f_sub = sub_in.clone();
        let sal = round.speaker_sal.unwrap();
        for f in 0..t {
            let frame: Rows = (0..s)
                .map(|i| {
                    (0..D)
                        .map(|c| sub_in[i][f][c] + if r == 0 { table.get(&[i, c]) } else { 0.0 })
                        .collect()
                })
                .collect();
            let out = layer_oracle(store, &sal.0, &frame, &frame);
            for i in 0..s {
                f_sub[i][f] = out[i].clone();
            }
        }
        let sal = round.temporal_sal.unwrap();
        let f_time: Vec<Rows> = time_in
            .iter()
            .map(|rs| layer_oracle(store, &sal.0, rs, rs))
            .collect();
        time_in = (0..s)
            .map(|i| layer_oracle(store, &round.cal_time.0, &f_time[i], &f_sub[i]))
            .collect();
        sub_in = (0..s)
            .map(|i| layer_oracle(store, &round.cal_sub.0, &f_sub[i], &f_time[i]))
            .collect();
    }
    (0..s)
        .map(|i| {
            let fused = add(&time_in[i], &sub_in[i]);
            proj(store, &st.head, &fused)
                .into_iter()
                .map(|r| r[0])
                .collect()
        })
        .collect()
}

#[test]
fn scores_have_one_logit_per_cell() {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(32, 4).unwrap();
    let st =
        DualStreamStack::new(&mut store, cfg, 2, 4, StreamToggles::default(), &mut rng(1)).unwrap();
    let out = scores(&store, &st, &rand_tensor(&[2, 4, 32], &mut rng(2))).unwrap();
    assert_eq!(out.shape(), &[2, 4]);
}

#[test]
fn default_configuration_uses_two_rounds() {
    assert_eq!(ModelConfig::default().rounds, 2);
}

#[test]
fn full_forward_matches_composition_oracle() {
    for trial in 0..5 {
        let (store, st) = stack(2, 4, 10 + trial);
        let x = rand_tensor(&[3, 4, D], &mut rng(20 + trial));
        let got = scores(&store, &st, &x).unwrap();
        let oracle = dual_oracle(&store, &st, &x);
        for (i, row) in oracle.iter().enumerate() {
            for (f, o) in row.iter().enumerate() {
                assert!(
                    (got.get(&[i, f]) - o).abs() <= 1e-9,
                    "trial {trial} ({i},{f})"
                );
            }
        }
    }
}

#[test]
fn too_many_speakers_is_capacity_error() {
    let (store, st) = stack(1, 2, 3);
    let err = scores(&store, &st, &Tensor::zeros(&[3, 2, D])).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Capacity {
                requested: 3,
                available: 2,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn zeroed_embedding_makes_forward_speaker_equivariant() {
    let (mut store, st) = stack(2, 4, 4);
    zero_embedding(&mut store, &st);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let x = rand_tensor(&[3, 4, D], &mut rng(1000 + trial));
        let perm = shuffled(3, trial);
        let a = permute_speakers(&scores(&store, &st, &x).unwrap(), &perm);
        let b = scores(&store, &st, &permute_speakers(&x, &perm)).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst <= 1e-9, "{worst:e}");
}

#[test]
fn speaker_embedding_breaks_speaker_symmetry() {
    let (store, st) = stack(1, 4, 5);
    let x = rand_tensor(&[2, 3, D], &mut rng(6));
    let a = permute_speakers(&scores(&store, &st, &x).unwrap(), &[1, 0]);
    let b = scores(&store, &st, &permute_speakers(&x, &[1, 0])).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

fn speaker_out(store: &ParamStore, st: &DualStreamStack, x: &Tensor, with_emb: bool) -> Tensor {
    let mut g = Graph::new(store);
    let v = g.input(x.clone());
    let emb = with_emb.then_some(&st.embedding);
    let y = speaker_stream(&mut g, v, emb, st.rounds[0].speaker_sal.as_ref().unwrap()).unwrap();
    g.value(y).clone()
}

fn temporal_out(store: &ParamStore, st: &DualStreamStack, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store);
    let v = g.input(x.clone());
    let y = temporal_stream(&mut g, v, st.rounds[0].temporal_sal.as_ref().unwrap()).unwrap();
    g.value(y).clone()
}

#[test]
fn single_speaker_stream_is_pointwise_on_embedded_input() {
    let (store, st) = stack(1, 3, 7);
    let x = rand_tensor(&[1, 4, D], &mut rng(8));
    let out = speaker_out(&store, &st, &x, true);
    let table = store.value(st.embedding.table);
    let sal = st.rounds[0].speaker_sal.unwrap();
    for f in 0..4 {
        let token = vec![(0..D)
            .map(|c| x.get(&[0, f, c]) + table.get(&[0, c]))
            .collect::<Vec<_>>()];
        let expect = layer_oracle(&store, &sal.0, &token, &token);
        for c in 0..D {
            assert!((out.get(&[0, f, c]) - expect[0][c]).abs() <= 1e-10);
        }
    }
}

fn frame(t: &Tensor, f: usize) -> Vec<f64> {
    let (s, tl, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..s)
        .flat_map(|i| t.data()[(i * tl + f) * d..(i * tl + f + 1) * d].to_vec())
        .collect()
}

fn speaker_rows(t: &Tensor, i: usize) -> &[f64] {
    let n = t.len() / t.shape()[0];
    &t.data()[i * n..(i + 1) * n]
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn speaker_stream_never_mixes_frames() {
    let (store, st) = stack(1, 4, 9);
    let x = rand_tensor(&[3, 5, D], &mut rng(10));
    let base = speaker_out(&store, &st, &x, true);
    let mut y = x.clone();
    for i in 0..3 {
        for c in 0..D {
            y.set(&[i, 2, c], 5.0 * (c as f64 - 3.0));
        }
    }
    let moved = speaker_out(&store, &st, &y, true);
    for f in (0..5).filter(|&f| f != 2) {
        assert!(max_abs(&frame(&base, f), &frame(&moved, f)) <= 1e-12);
    }
    assert!(max_abs(&frame(&base, 2), &frame(&moved, 2)) > 1e-6);
}

#[test]
fn temporal_stream_never_mixes_speakers() {
    let (store, st) = stack(1, 4, 11);
    let x = rand_tensor(&[3, 5, D], &mut rng(12));
    let base = temporal_out(&store, &st, &x);
    let mut y = x.clone();
    for v in &mut y.data_mut()[5 * D..10 * D] {
        *v = 0.0;
    }
    let moved = temporal_out(&store, &st, &y);
    assert!(max_abs(speaker_rows(&base, 0), speaker_rows(&moved, 0)) <= 1e-12);
    assert!(max_abs(speaker_rows(&base, 2), speaker_rows(&moved, 2)) <= 1e-12);
    let perm = [2, 0, 1];
    let a = permute_speakers(&base, &perm);
    let b = temporal_out(&store, &st, &permute_speakers(&x, &perm));
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn single_frame_temporal_stream_is_pointwise() {
    let (store, st) = stack(1, 4, 13);
    let x = rand_tensor(&[3, 1, D], &mut rng(14));
    let out = temporal_out(&store, &st, &x);
    let sal = st.rounds[0].temporal_sal.unwrap();
    for i in 0..3 {
        let token = vec![speaker_rows(&x, i).to_vec()];
        let expect = layer_oracle(&store, &sal.0, &token, &token);
        assert!(max_abs(speaker_rows(&out, i), &expect[0]) <= 1e-10);
    }
}

fn cross(
    store: &ParamStore,
    st: &DualStreamStack,
    a: &Tensor,
    b: &Tensor,
) -> d2stream::Result<(Tensor, Tensor)> {
    let mut g = Graph::new(store);
    let av = g.input(a.clone());
    let bv = g.input(b.clone());
    let r = &st.rounds[0];
    let (t, s) = cross_interact(&mut g, av, bv, &r.cal_time, &r.cal_sub)?;
    Ok((g.value(t).clone(), g.value(s).clone()))
}

#[test]
fn cross_interaction_with_identical_inputs_is_self_attention() {
    let (store, st) = stack(1, 4, 15);
    let x = rand_tensor(&[2, 4, D], &mut rng(16));
    let (t, s) = cross(&store, &st, &x, &x).unwrap();
    assert_eq!(t.shape(), &[2, 4, D]);
    assert_eq!(s.shape(), &[2, 4, D]);
    let r = &st.rounds[0];
    for i in 0..2 {
        let xi = rows(&x, i);
        let et = layer_oracle(&store, &r.cal_time.0, &xi, &xi);
        let es = layer_oracle(&store, &r.cal_sub.0, &xi, &xi);
        assert!(max_diff(&rows(&t, i), &et) <= 1e-10);
        assert!(max_diff(&rows(&s, i), &es) <= 1e-10);
    }
}

#[test]
fn cross_interaction_is_local_to_each_speaker() {
    let (store, st) = stack(1, 4, 17);
    let a = rand_tensor(&[3, 4, D], &mut rng(18));
    let b = rand_tensor(&[3, 4, D], &mut rng(19));
    let (bt, bs) = cross(&store, &st, &a, &b).unwrap();
    let (mut a2, mut b2) = (a.clone(), b.clone());
    for v in a2.data_mut()[..4 * D]
        .iter_mut()
        .chain(b2.data_mut()[8 * D..].iter_mut())
    {
        *v = 0.0;
    }
    let (mt, ms) = cross(&store, &st, &a2, &b2).unwrap();
    assert!(max_abs(speaker_rows(&bt, 1), speaker_rows(&mt, 1)) <= 1e-12);
    assert!(max_abs(speaker_rows(&bs, 1), speaker_rows(&ms, 1)) <= 1e-12);
    assert!(cross(&store, &st, &a, &Tensor::zeros(&[3, 5, D])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scores_are_finite(s in 1usize..=4, t in 1usize..=6, scale in 0.1f64..100.0, seed in 0u64..100) {
        let (store, st) = stack(2, 4, seed);
        let mut x = rand_tensor(&[s, t, D], &mut rng(seed));
        for v in x.data_mut() {
            *v *= scale;
        }
        let out = scores(&store, &st, &x).unwrap();
        prop_assert_eq!(out.shape(), &[s, t]);
        prop_assert!(out.is_finite());
    }
}
