//! Straight-line reimplementations of the training loss and the evaluation
//! scorer over plain vectors, compared against the library.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plid_core::corpus::{Pair, Vocabulary};
use plid_core::encoder::{ImageViews, TextEncoder};
use plid_core::evaluation::Scorer;
use plid_core::exec::Execution;
use plid_core::model::ModelParams;
use plid_core::objective::{total_loss, Example, LossSettings, StepNoise, TrainingProblem};

type Mat = Vec<Vec<f64>>;

fn mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn mtv(m: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for (r, xi) in m.iter().zip(x) {
        for (o, a) in out.iter_mut().zip(r) {
            *o += a * xi;
        }
    }
    out
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = dotv(x, x).sqrt();
    x.iter().map(|v| v / n).collect()
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

struct Attn {
    wq: Mat,
    wk: Mat,
    wv: Mat,
}

fn attend(a: &Attn, q: &[f64], support: &Mat, mask: Option<&[f64]>) -> Vec<f64> {
    let d = q.len() as f64;
    let r = mtv(&a.wk, &mv(&a.wq, q));
    let scores: Vec<f64> = support.iter().map(|s| dotv(s, &r) / d.sqrt()).collect();
    let z = lse(&scores);
    let w: Vec<f64> = scores.iter().map(|s| (s - z).exp()).collect();
    let ctx = mtv(support, &w);
    let att = mv(&a.wv, &ctx);
    let pre: Vec<f64> = (0..q.len())
        .map(|j| q[j] + att[j] * mask.map_or(1.0, |m| m[j]))
        .collect();
    unit(&pre)
}

struct Head {
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

fn head(h: &Head, v: &[f64]) -> Vec<f64> {
    let hid: Vec<f64> = mv(&h.w1, v).iter().zip(&h.b1).map(|(a, b)| gelu(a + b)).collect();
    let out = mv(&h.w2, &hid);
    unit(&(0..v.len()).map(|j| v[j] + out[j] + h.b2[j]).collect::<Vec<_>>())
}

struct Oracle {
    context: Mat,
    states: Mat,
    objects: Mat,
    projection: Mat,
    tfe: Attn,
    vfe: Attn,
    state_head: Head,
    object_head: Head,
}

impl Oracle {
    fn new(p: &ModelParams, text: &TextEncoder) -> Self {
        let attn = |a: &plid_core::lid::CrossAttention| Attn {
            wq: mat(&a.wq),
            wk: mat(&a.wk),
            wv: mat(&a.wv),
        };
        let hd = |h: &plid_core::vlpd::ProjectionHead| Head {
            w1: mat(&h.w1),
            b1: h.b1.to_vec(),
            w2: mat(&h.w2),
            b2: h.b2.to_vec(),
        };
        Oracle {
            context: mat(&p.prompt.context),
            states: mat(&p.prompt.states),
            objects: mat(&p.prompt.objects),
            projection: mat(text.projection()),
            tfe: attn(&p.tfe),
            vfe: attn(&p.vfe),
            state_head: hd(&p.heads.state),
            object_head: hd(&p.heads.object),
        }
    }

    fn class_mean(&self, p: Pair, descs: &Mat, mask: Option<&[f64]>) -> Vec<f64> {
        let mut tokens = self.context.clone();
        tokens.push(self.states[p.state].clone());
        tokens.push(self.objects[p.object].clone());
        let n = tokens.len() as f64;
        let pooled: Vec<f64> = (0..tokens[0].len())
            .map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / n)
            .collect();
        let q = unit(&mv(&self.projection, &pooled));
        attend(&self.tfe, &q, descs, mask)
    }

    fn visual(&self, views: &ImageViews, mask: Option<&[f64]>) -> Vec<f64> {
        let mut support = vec![views.anchor.to_vec()];
        support.extend(mat(&views.views));
        attend(&self.vfe, &views.anchor.to_vec(), &support, mask)
    }
}

/// Normalized group means of `rows` under `key`.
fn group_targets(rows: &Mat, classes: &[Pair], groups: usize, key: fn(Pair) -> usize) -> Mat {
    (0..groups)
        .map(|g| {
            let members: Vec<&Vec<f64>> =
                classes.iter().zip(rows).filter(|(p, _)| key(**p) == g).map(|(_, r)| r).collect();
            let mean: Vec<f64> = (0..rows[0].len())
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect();
            unit(&mean)
        })
        .collect()
}

/// `A[j][k][y]` from description sets, `sets[c]` is `M x d`.
fn margin_table(sets: &[Mat]) -> Vec<Vec<Vec<f64>>> {
    let m = sets[0].len() as f64;
    let d = sets[0][0].len();
    let c = sets.len();
    let cov = |j: usize, k: usize, y: usize| {
        sets[k].iter().zip(&sets[y]).map(|(a, b)| a[j] * b[j]).sum::<f64>() / m
    };
    (0..d)
        .map(|j| {
            (0..c)
                .map(|k| {
                    (0..c)
                        .map(|y| cov(j, k, k) + cov(j, y, y) - cov(j, k, y) - cov(j, y, k))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn grouped_sets(sets: &[Mat], classes: &[Pair], groups: usize, key: fn(Pair) -> usize) -> Vec<Mat> {
    (0..groups)
        .map(|g| {
            let members: Vec<&Mat> =
                classes.iter().zip(sets).filter(|(p, _)| key(**p) == g).map(|(_, s)| s).collect();
            let n = members.len() as f64;
            (0..sets[0].len())
                .map(|r| {
                    (0..sets[0][0].len())
                        .map(|j| members.iter().map(|s| s[r][j]).sum::<f64>() / n)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn margined_loss(h: &[f64], f: &[f64], table: &[Vec<Vec<f64>>], y: usize, tau: f64) -> f64 {
    let z: Vec<f64> = (0..h.len())
        .map(|k| {
            let m = if k == y {
                0.0
            } else {
                (0..f.len()).map(|j| f[j] * f[j] * table[j][k][y]).sum::<f64>() / (2.0 * tau)
            };
            (h[k] + m) / tau
        })
        .collect();
    lse(&z) - h[y] / tau
}

struct Fixture {
    text: TextEncoder,
    params: ModelParams,
    classes: Vec<Pair>,
    descriptions: Vec<Array2<f64>>,
    views: Vec<ImageViews>,
    rng: ChaCha8Rng,
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

fn fixture(d: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let text = TextEncoder::new(3, d, d);
    let vocab = Vocabulary::new(
        vec!["wet".into(), "dry".into(), "old".into()],
        vec!["cat".into(), "box".into()],
    )
    .unwrap();
    let mut params = ModelParams::init(&text, &vocab, 3, 9).unwrap();
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += 0.2 * (rng.random::<f64>() - 0.5);
        }
    }
    let classes = vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 1), Pair::new(2, 0)];
    let descriptions = (0..classes.len()).map(|_| randn(&mut rng, (3, d), 0.5)).collect();
    let views = (0..2)
        .map(|_| {
            let a = randn(&mut rng, (1, d), 1.0).row(0).to_owned();
            let n = a.dot(&a).sqrt();
            ImageViews {
                anchor: a / n,
                views: randn(&mut rng, (2, d), 0.4),
            }
        })
        .collect();
    Fixture {
        text,
        params,
        classes,
        descriptions,
        views,
        rng,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn total_loss_matches_a_straight_line_oracle() {
    let d = 6;
    let mut f = fixture(d);
    let tau = 0.2;
    let lambda = 0.3;
    let targets = [1usize, 3];
    let class_masks: Vec<Array1<f64>> = (0..4)
        .map(|_| Array1::from_shape_fn(d, |_| if f.rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 }))
        .collect();
    let sample_masks: Vec<Array1<f64>> = (0..2)
        .map(|_| Array1::from_shape_fn(d, |_| if f.rng.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 }))
        .collect();
    let noise = StepNoise {
        lambda,
        class_masks: Some(class_masks.clone()),
        sample_masks: Some(sample_masks.clone()),
    };
    let desc_refs: Vec<&Array2<f64>> = f.descriptions.iter().collect();
    let problem =
        TrainingProblem::new(&f.text, f.classes.clone(), desc_refs, 3, 2, false, Execution::Sequential)
            .unwrap();
    let batch: Vec<Example> = targets
        .iter()
        .zip(&f.views)
        .map(|(&t, v)| Example { views: v, target: t })
        .collect();

    let oracle = Oracle::new(&f.params, &f.text);
    let sets: Vec<Mat> = f.descriptions.iter().map(mat).collect();
    let means: Mat = f
        .classes
        .iter()
        .zip(&sets)
        .zip(&class_masks)
        .map(|((&p, s), m)| oracle.class_mean(p, s, Some(m.as_slice().unwrap())))
        .collect();
    let st = group_targets(&means, &f.classes, 3, |p| p.state);
    let ot = group_targets(&means, &f.classes, 2, |p| p.object);
    let a_comp = margin_table(&sets);
    let a_state = margin_table(&grouped_sets(&sets, &f.classes, 3, |p| p.state));
    let a_object = margin_table(&grouped_sets(&sets, &f.classes, 2, |p| p.object));

    for (use_margins, use_decomposition) in [(true, true), (false, true), (true, false), (false, false)] {
        let settings = LossSettings {
            tau,
            state_weight: 0.4,
            object_weight: 0.7,
            use_margins,
            use_decomposition,
        };
        let zero = |t: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            if use_margins { t.clone() } else { vec![vec![vec![0.0; t[0].len()]; t[0].len()]; d] }
        };
        let (ac, as_, ao) = (zero(&a_comp), zero(&a_state), zero(&a_object));
        let (mut ly, mut ls, mut lo) = (0.0, 0.0, 0.0);
        for (i, &y) in targets.iter().enumerate() {
            let v = oracle.visual(&f.views[i], Some(sample_masks[i].as_slice().unwrap()));
            let h_comp: Vec<f64> = means.iter().map(|t| dotv(t, &v)).collect();
            if use_decomposition {
                let fs = head(&oracle.state_head, &v);
                let fo = head(&oracle.object_head, &v);
                let hs: Vec<f64> = st.iter().map(|t| dotv(t, &fs)).collect();
                let ho: Vec<f64> = ot.iter().map(|t| dotv(t, &fo)).collect();
                let mixed: Vec<f64> = f
                    .classes
                    .iter()
                    .zip(&h_comp)
                    .map(|(p, h)| (1.0 - lambda) * h + lambda * (hs[p.state] + ho[p.object]))
                    .collect();
                ly += margined_loss(&mixed, &v, &ac, y, tau);
                let p = f.classes[y];
                ls += margined_loss(&hs, &fs, &as_, p.state, tau);
                lo += margined_loss(&ho, &fo, &ao, p.object, tau);
            } else {
                ly += margined_loss(&h_comp, &v, &ac, y, tau);
            }
        }
        let (ly, ls, lo) = (ly / 2.0, ls / 2.0, lo / 2.0);
        let total = if use_decomposition { ly + 0.4 * ls + 0.7 * lo } else { ly };

        let r = total_loss(&f.params, &problem, &batch, &noise, &settings, Execution::Sequential).unwrap();
        let tag = format!("margins {use_margins}, decomposition {use_decomposition}");
        assert!(close(r.loss_y, ly), "{tag}: loss_y {} vs {ly}", r.loss_y);
        if use_decomposition {
            assert!(close(r.loss_s, ls), "{tag}: loss_s {} vs {ls}", r.loss_s);
            assert!(close(r.loss_o, lo), "{tag}: loss_o {} vs {lo}", r.loss_o);
        }
        assert!(close(r.total, total), "{tag}: total {} vs {total}", r.total);
    }
}

#[test]
fn scorer_matches_a_straight_line_oracle() {
    let d = 6;
    let f = fixture(d);
    let candidates = [Pair::new(1, 1), Pair::new(2, 1), Pair::new(0, 0), Pair::new(1, 0)];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cand_descs: Vec<Array2<f64>> = candidates.iter().map(|_| randn(&mut rng, (3, d), 0.5)).collect();
    let seen_refs: Vec<&Array2<f64>> = f.descriptions.iter().collect();
    let cand_refs: Vec<&Array2<f64>> = cand_descs.iter().collect();
    let views: Vec<&ImageViews> = f.views.iter().collect();
    let oracle = Oracle::new(&f.params, &f.text);
    let seen_means: Mat = f
        .classes
        .iter()
        .zip(&f.descriptions)
        .map(|(&p, s)| oracle.class_mean(p, &mat(s), None))
        .collect();
    let cand_means: Mat = candidates
        .iter()
        .zip(&cand_descs)
        .map(|(&p, s)| oracle.class_mean(p, &mat(s), None))
        .collect();
    let st = group_targets(&seen_means, &f.classes, 3, |p| p.state);
    let ot = group_targets(&seen_means, &f.classes, 2, |p| p.object);

    for lambda in [0.0, 0.25, 1.0] {
        let scorer = Scorer::new(&f.params, &f.text, &f.classes, &seen_refs, 3, 2, lambda, Execution::Sequential)
            .unwrap();
        let got = scorer.score(&f.text, &views, &candidates, &cand_refs, Execution::Sequential).unwrap();
        assert_eq!(got.dim(), (2, 4));
        for (i, v) in f.views.iter().enumerate() {
            let v = oracle.visual(v, None);
            let fs = head(&oracle.state_head, &v);
            let fo = head(&oracle.object_head, &v);
            for (k, p) in candidates.iter().enumerate() {
                let comp = dotv(&cand_means[k], &v);
                let rc = dotv(&st[p.state], &fs) + dotv(&ot[p.object], &fo);
                let want = if lambda == 0.0 { comp } else { (1.0 - lambda) * comp + lambda * rc };
                assert!(close(got[[i, k]], want), "lambda {lambda} [{i},{k}]: {} vs {want}", got[[i, k]]);
            }
        }
    }
}
