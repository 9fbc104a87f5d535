use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use implicit_ce::dataset::SparseRow;
use implicit_ce::losses::per_user_corr_loss;
use implicit_ce::model::{ForwardOptions, Model, ModelConfig, SimilarityKind};

fn random_model(kind: SimilarityKind, batch_norm: bool, seed: u64) -> Model {
    let mut c = ModelConfig::new(7, 5);
    c.n_users = 4;
    c.d_aux = 4;
    c.d = 3;
    c.hidden_sizes = vec![6, 5];
    c.batch_norm = batch_norm;
    c.similarity = kind;
    c.user_bias = true;
    c.item_bias = true;
    let mut m = Model::init(c, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for slot in m.params.slots() {
        for v in m.params.slot_mut(slot) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for layer in &mut m.params.hidden {
        if let Some(bn) = &mut layer.norm {
            bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.2..2.0));
        }
    }
    m
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, n_items: usize) -> Vec<SparseRow> {
    (0..n)
        .map(|_| {
            let mut e: Vec<(usize, f64)> = (0..n_items)
                .filter(|_| rng.random::<f64>() < 0.6)
                .map(|a| (a, 0.0))
                .collect();
            if e.is_empty() {
                e.push((0, 0.0));
            }
            for x in &mut e {
                x.1 = rng.random_range(0.5..4.0);
            }
            SparseRow::new(e).unwrap()
        })
        .collect()
}

/// Inference forward pass and prediction written as plain loops.
fn oracle_predictions(m: &Model, rows: &[SparseRow], users: &[usize], items: &[usize]) -> Vec<Vec<f64>> {
    let p = &m.params;
    let eps = m.config.bn_eps;
    let mut out = Vec::new();
    for (row, &user) in rows.iter().zip(users) {
        let mut h = vec![0.0; m.config.d_aux];
        for (a, k) in row.iter() {
            for (c, hc) in h.iter_mut().enumerate() {
                *hc += k * p.aux_embeddings[[a, c]];
            }
        }
        for layer in &p.hidden {
            let w = &layer.affine.weight;
            let mut z = vec![0.0; w.ncols()];
            for (o, zo) in z.iter_mut().enumerate() {
                for (i, hi) in h.iter().enumerate() {
                    *zo += hi * w[[i, o]];
                }
                if let Some(b) = &layer.affine.bias {
                    *zo += b[o];
                }
                if let Some(bn) = &layer.norm {
                    *zo = (*zo - bn.running_mean[o]) / (bn.running_var[o] + eps).sqrt() * bn.scale[o] + bn.shift[o];
                }
                *zo = zo.max(0.0);
            }
            h = z;
        }
        let o = p.output.as_ref().unwrap();
        let mut e = vec![0.0; m.config.d];
        for (c, ec) in e.iter_mut().enumerate() {
            for (i, hi) in h.iter().enumerate() {
                *ec += hi * o.weight[[i, c]];
            }
            *ec += o.bias.as_ref().unwrap()[c];
        }
        let scores = items
            .iter()
            .map(|&j| {
                let v: Vec<f64> = (0..m.config.d).map(|c| p.target_embeddings[[j, c]]).collect();
                let dot: f64 = e.iter().zip(&v).map(|(a, b)| a * b).sum();
                let nu = e.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let dist = e.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let sim = match m.config.similarity {
                    SimilarityKind::Dot => dot,
                    SimilarityKind::Cosine => dot / (nu * nv),
                    SimilarityKind::Euclidean => 1.0 - dist,
                };
                sim + p.user_bias.as_ref().unwrap()[user] + p.item_bias.as_ref().unwrap()[j]
            })
            .collect();
        out.push(scores);
    }
    out
}

#[test]
fn inference_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (t, kind) in [SimilarityKind::Dot, SimilarityKind::Cosine, SimilarityKind::Euclidean]
        .into_iter()
        .cycle()
        .take(12)
        .enumerate()
    {
        let m = random_model(kind, t % 2 == 0, t as u64);
        let rows = random_rows(&mut rng, 4, 7);
        let refs: Vec<&SparseRow> = rows.iter().collect();
        let users = [0usize, 1, 2, 3];
        let items = [4usize, 0, 2];
        let (p, _) = m.forward_block(&refs, Some(&users), &items, &ForwardOptions::inference()).unwrap();
        let oracle = oracle_predictions(&m, &rows, &users, &items);
        for b in 0..4 {
            for r in 0..3 {
                let (got, want) = (p[[b, r]], oracle[b][r]);
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1e-12) + 1e-14,
                    "{kind:?} case {t}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn one_user_one_item_block_is_the_similarity() {
    let m = random_model(SimilarityKind::Cosine, false, 9);
    let row = SparseRow::new(vec![(1, 2.0), (5, 1.0)]).unwrap();
    let e = m.user_embeddings(&[&row]).unwrap();
    let p = m.predict_block(e.view(), None, &[3]).unwrap();
    assert_eq!(p.dim(), (1, 1));
    let u = e.row(0).to_vec();
    let v = m.params.target_embeddings.row(3).to_vec();
    let expect = implicit_ce::model::similarity(SimilarityKind::Cosine, &u, &v).unwrap()
        + m.params.item_bias.as_ref().unwrap()[3];
    assert_eq!(p[[0, 0]], expect);
}

#[test]
fn scaling_inputs_keeps_linear_cosine_ranking() {
    let mut c = ModelConfig::new(6, 8);
    c.d_aux = 4;
    c.d = 4;
    let m = Model::init(c, 2).unwrap();
    let row = SparseRow::new(vec![(0, 1.0), (3, 2.0), (5, 4.0)]).unwrap();
    let items: Vec<usize> = (0..8).collect();
    let score = |r: &SparseRow| {
        let e = m.user_embeddings(&[r]).unwrap();
        m.predict_block(e.view(), None, &items).unwrap().row(0).to_vec()
    };
    let rank = |s: Vec<f64>| implicit_ce::metrics::ranking(&s);
    assert_eq!(rank(score(&row)), rank(score(&row.scaled(10.0))));
}

/// Central differences of the correlation loss through a model trained with a
/// fixed dropout mask.
#[test]
fn gradients_with_dropout_and_euclidean_match_finite_differences() {
    for kind in [SimilarityKind::Euclidean, SimilarityKind::Cosine] {
        let mut c = ModelConfig::new(5, 4);
        c.d_aux = 3;
        c.d = 3;
        c.hidden_sizes = vec![4];
        c.batch_norm = true;
        c.similarity = kind;
        let mut m = Model::init(c, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for slot in m.params.slots() {
            for v in m.params.slot_mut(slot) {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let rows = [
            SparseRow::new(vec![(0, 1.0), (2, 2.0), (4, 1.0)]).unwrap(),
            SparseRow::new(vec![(1, 3.0), (3, 1.0), (4, 0.5)]).unwrap(),
        ];
        let refs: Vec<&SparseRow> = rows.iter().collect();
        let items = [0usize, 1, 2, 3];
        let y = ndarray::array![[1.0, 0.0, 3.0, 2.0], [0.0, 5.0, 1.0, 1.0]];
        let opts = ForwardOptions::train(0.25, 17);
        let value = |m: &Model| {
            let (p, _) = m.forward_block(&refs, None, &items, &opts).unwrap();
            per_user_corr_loss(&p, &y).unwrap().value
        };
        let (p, trace) = m.forward_block(&refs, None, &items, &opts).unwrap();
        let lv = per_user_corr_loss(&p, &y).unwrap();
        let g = m.backward(&trace, &lv.dp).unwrap();
        let mut probe = m.clone();
        let h = 1e-5;
        for slot in m.params.slots() {
            let n = m.params.slot(slot).len();
            let analytic = g.dense(slot, n);
            for k in 0..n {
                let orig = probe.params.slot(slot)[k];
                probe.params.slot_mut(slot)[k] = orig + h;
                let up = value(&probe);
                probe.params.slot_mut(slot)[k] = orig - h;
                let down = value(&probe);
                probe.params.slot_mut(slot)[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{kind:?} {slot:?}[{k}]: {} vs {numeric}", analytic[k]);
            }
        }
    }
}

#[test]
fn block_shapes_are_checked() {
    let m = random_model(SimilarityKind::Dot, false, 3);
    let e = Array2::zeros((2, 5));
    assert!(m.predict_block(e.view(), None, &[0]).is_err());
    let e = Array2::zeros((2, 3));
    assert!(m.predict_block(e.view(), None, &[99]).is_err());
    assert!(m.predict_block(e.view(), Some(&[0]), &[0]).is_err());
}
