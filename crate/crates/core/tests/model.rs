mod common;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use common::{assert_bitwise, random_inputs, random_tensor, rng};
use refquery::model::{mask_logits, FusedFeatures, FusionMode, Model, ModelConfig};
use refquery::tensor::{finite_diff_check_subset, DeformGeometry, LayerNorm, ParamStore, Tape, Tensor, Var};
use refquery::selfcheck::move_samples_off_grid;

fn config(c: usize, heads: usize, inputs: &[usize], text: usize, fusion: FusionMode) -> ModelConfig {
    let mut m = ModelConfig {
        channels: c,
        heads,
        ffn_ratio: 2,
        input_channels: inputs.to_vec(),
        text_channels: text,
        ..ModelConfig::default()
    };
    m.encoder.layers = 2;
    m.encoder.points = 2;
    m.encoder.fusion = fusion;
    m.frame_decoder.layers = 2;
    m.frame_decoder.queries = 5;
    m.video_decoder.layers = 2;
    m.video_decoder.queries = 5;
    m
}

fn zero_params(model: &mut Model, prefix: &str, parts: &[&str]) -> usize {
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix) && parts.iter().any(|p| n.contains(p)))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in &names {
        let shape = model.store.get(model.store.id(n).unwrap()).shape().to_vec();
        model.store.set(n, Tensor::zeros(shape)).unwrap();
    }
    names.len()
}

#[test]
fn zeroed_encoder_outputs_leave_projected_features() {
    for fusion in [FusionMode::Deformable, FusionMode::Dense] {
        let mut model = Model::new(config(8, 2, &[6, 4], 5, fusion), 3).unwrap();
        assert!(zero_params(&mut model, "encoder.layers.", &[".out.", ".fc2."]) > 0);
        let inputs = random_inputs(&mut rng(1), 2, &[(4, 4), (2, 2)], &[6, 4], 3, 5);
        let mut tape = Tape::<f64>::new();
        let vars = model.store.bind(&mut tape);
        let (v, t) = model.encoder.project_inputs(&mut tape, &vars, &inputs).unwrap();
        let fused = model.encoder.encode(&mut tape, &vars, &inputs).unwrap();
        assert_bitwise(tape.value(fused.visual), tape.value(v), "visual");
        assert_bitwise(tape.value(fused.text), tape.value(t), "text");
    }
}

/// Parameter lookup and the layer primitives, recomputed on plain vectors.
struct Manual<'a>(&'a ParamStore);

impl Manual<'_> {
    fn t(&self, name: &str) -> Tensor<f64> {
        self.0.get(self.0.id(name).unwrap_or_else(|| panic!("{name}"))).cast()
    }

    fn lin(&self, x: &[f64], name: &str) -> Vec<f64> {
        let w = self.t(&format!("{name}.weight"));
        let b = self.t(&format!("{name}.bias"));
        let (i, o) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|j| b.data()[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>())
            .collect()
    }

    fn ln(&self, x: &[f64], name: &str) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (g, b) = (self.t(&format!("{name}.gain")), self.t(&format!("{name}.bias")));
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + LayerNorm::EPS).sqrt() * g.data()[j] + b.data()[j])
            .collect()
    }

    fn ffn(&self, x: &[f64], name: &str) -> Vec<f64> {
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let h: Vec<f64> = self.lin(x, &format!("{name}.fc1")).into_iter().map(gelu).collect();
        self.lin(&h, &format!("{name}.fc2"))
    }

    /// With a single key, attention returns the projected value.
    fn single_key_attention(&self, kv: &[f64], name: &str) -> Vec<f64> {
        self.lin(&self.lin(kv, &format!("{name}.v")), &format!("{name}.out"))
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[test]
fn dense_single_token_layer_matches_hand_computation() {
    let mut cfg = config(4, 2, &[3], 5, FusionMode::Dense);
    cfg.encoder.layers = 1;
    let model = Model::new(cfg, 9).unwrap();
    let inputs = random_inputs(&mut rng(2), 1, &[(1, 1)], &[3], 1, 5);
    let mut tape = Tape::<f64>::new();
    let vars = model.store.bind(&mut tape);
    let fused = model.encoder.encode(&mut tape, &vars, &inputs).unwrap();

    let m = Manual(&model.store);
    let p = "encoder.layers.0";
    let v0 = m.lin(inputs.scales[0].data(), "encoder.input_proj.0");
    let t0 = m.lin(inputs.text.data(), "encoder.text_proj");
    let v1 = add(&v0, &m.single_key_attention(&m.ln(&v0, &format!("{p}.norm_self")), &format!("{p}.self_attn")));
    let v2 = add(&v1, &m.single_key_attention(&t0, &format!("{p}.image_to_text")));
    let t1 = add(&t0, &m.single_key_attention(&v2, &format!("{p}.text_to_image")));
    let v3 = add(&v2, &m.ffn(&m.ln(&v2, &format!("{p}.norm_ffn_v")), &format!("{p}.ffn_v")));
    let t2 = add(&t1, &m.ffn(&m.ln(&t1, &format!("{p}.norm_ffn_t")), &format!("{p}.ffn_t")));

    let close = |got: &Tensor<f64>, want: &[f64], what: &str| {
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{what}: {g} vs {w}");
        }
    };
    close(tape.value(fused.visual), &v3, "visual");
    close(tape.value(fused.text), &t2, "text");
    close(tape.value(fused.sentence), &t2, "sentence");
}

#[test]
fn output_shapes_follow_the_configuration() {
    let mut r = rng(20);
    for case in 0..20 {
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(2..=4);
        let n_levels = r.gen_range(1..=3);
        let levels: Vec<(usize, usize)> = (0..n_levels).map(|_| (r.gen_range(1..=4), r.gen_range(1..=4))).collect();
        let widths: Vec<usize> = (0..n_levels).map(|_| r.gen_range(1..=6)).collect();
        let (frames, tokens, text) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=6));
        let queries = r.gen_range(1..=4);
        let inputs = random_inputs(&mut r, frames, &levels, &widths, tokens, text);
        let mut shapes = Vec::new();
        for fusion in [FusionMode::Deformable, FusionMode::Dense] {
            let mut cfg = config(c, heads, &widths, text, fusion);
            cfg.encoder.layers = 1;
            cfg.frame_decoder.queries = queries;
            cfg.video_decoder.queries = queries;
            let model = Model::new(cfg, case).unwrap();
            let mut tape = Tape::<f64>::new();
            let vars = model.store.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &inputs, None).unwrap();
            let (h0, w0) = levels[0];
            let s: usize = levels.iter().map(|&(h, w)| h * w).sum();
            let expect: [(Var, Vec<usize>); 9] = [
                (out.fused.visual, vec![frames * s, c]),
                (out.fused.text, vec![tokens, c]),
                (out.fused.sentence, vec![1, c]),
                (out.frame_queries, vec![frames * queries, c]),
                (out.video_queries, vec![queries, c]),
                (out.mask_logits, vec![queries, frames * h0 * w0]),
                (out.score_logits, vec![queries, 1]),
                (out.frame_score_logits, vec![frames * queries, 1]),
                (out.similarity, vec![queries, c]),
            ];
            for (v, shape) in &expect {
                assert_eq!(tape.shape(*v), shape.as_slice(), "case {case} {fusion:?}");
                assert!(tape.value(*v).all_finite(), "case {case} {fusion:?}");
            }
            assert_eq!(out.frame_mask_logits.len(), frames);
            for &f in &out.frame_mask_logits {
                assert_eq!(tape.shape(f), &[queries, h0 * w0]);
            }
            shapes.push(expect.iter().map(|(v, _)| tape.shape(*v).to_vec()).collect::<Vec<_>>());
        }
        assert_eq!(shapes[0], shapes[1]);
    }
}

struct DecoderInputs {
    visual: Tensor<f64>,
    text: Tensor<f64>,
    sentence: Tensor<f64>,
    levels: Vec<(usize, usize)>,
    frames: usize,
}

impl DecoderInputs {
    fn random(seed: u64, frames: usize, c: usize) -> Self {
        let mut r = rng(seed);
        let levels = vec![(3, 3), (2, 2)];
        DecoderInputs {
            visual: random_tensor(&mut r, &[frames * 13, c]),
            text: random_tensor(&mut r, &[4, c]),
            sentence: random_tensor(&mut r, &[1, c]),
            levels,
            frames,
        }
    }

    fn fused(&self, tape: &mut Tape<f64>, heads: usize) -> FusedFeatures {
        FusedFeatures {
            visual: tape.constant(self.visual.clone()),
            text: tape.constant(self.text.clone()),
            sentence: tape.constant(self.sentence.clone()),
            geometry: Arc::new(DeformGeometry::new(&self.levels, self.frames, heads, 1)),
        }
    }

    fn decode(&self, model: &Model) -> Tensor<f64> {
        let mut tape = Tape::<f64>::new();
        let vars = model.store.bind(&mut tape);
        let fused = self.fused(&mut tape, model.config.heads);
        let q = model.frame_decoder.decode(&mut tape, &vars, &fused).unwrap();
        tape.value(q).clone()
    }

    fn frame_rows(&self, t: usize) -> std::ops::Range<usize> {
        t * 13..(t + 1) * 13
    }
}

fn rows(t: &Tensor<f64>, r: std::ops::Range<usize>) -> Tensor<f64> {
    let c = t.cols();
    Tensor::new([r.len(), c], t.data()[r.start * c..r.end * c].to_vec()).unwrap()
}

fn frame_model() -> Model {
    Model::new(config(8, 2, &[8, 8], 8, FusionMode::Dense), 5).unwrap()
}

#[test]
fn replacing_one_frame_changes_only_its_queries() {
    let model = frame_model();
    let n = model.frame_decoder.queries();
    let a = DecoderInputs::random(1, 3, 8);
    let mut b = DecoderInputs::random(1, 3, 8);
    let mut r = rng(99);
    for i in b.frame_rows(1) {
        for j in 0..8 {
            b.visual.data_mut()[i * 8 + j] = r.gen_range(-1.0..1.0);
        }
    }
    let (qa, qb) = (a.decode(&model), b.decode(&model));
    assert_eq!(qa.shape(), &[3 * n, 8]);
    for t in [0, 2] {
        assert_bitwise(&rows(&qa, t * n..(t + 1) * n), &rows(&qb, t * n..(t + 1) * n), "untouched frame");
    }
    assert!(rows(&qa, n..2 * n).max_abs_diff(&rows(&qb, n..2 * n)) > 1e-6);
}

#[test]
fn duplicated_frame_gives_identical_queries() {
    let model = frame_model();
    let n = model.frame_decoder.queries();
    let mut x = DecoderInputs::random(2, 2, 8);
    let first = x.visual.data()[..13 * 8].to_vec();
    x.visual.data_mut()[13 * 8..].copy_from_slice(&first);
    let q = x.decode(&model);
    assert_bitwise(&rows(&q, 0..n), &rows(&q, n..2 * n), "duplicated frame");

    let single = DecoderInputs {
        visual: rows(&x.visual, 0..13),
        text: x.text.clone(),
        sentence: x.sentence.clone(),
        levels: x.levels.clone(),
        frames: 1,
    };
    let q1 = single.decode(&model);
    assert_eq!(q1.shape(), &[n, 8]);
    assert_bitwise(&q1, &rows(&q, 0..n), "decoded alone");
}

#[test]
fn spatial_token_order_does_not_matter() {
    let model = frame_model();
    let x = DecoderInputs::random(3, 2, 8);
    let mut perm: Vec<usize> = (0..13).collect();
    perm.shuffle(&mut rng(4));
    let mut y = DecoderInputs::random(3, 2, 8);
    for t in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            let (d, s) = ((t * 13 + dst) * 8, (t * 13 + src) * 8);
            let row = x.visual.data()[s..s + 8].to_vec();
            y.visual.data_mut()[d..d + 8].copy_from_slice(&row);
        }
    }
    assert!(x.decode(&model).max_abs_diff(&y.decode(&model)) < 1e-9);
}

#[test]
fn zero_sentence_initializes_to_positional_embeddings() {
    let model = frame_model();
    let mut tape = Tape::<f64>::new();
    let vars = model.store.bind(&mut tape);
    let zero = tape.constant(Tensor::zeros([1, 8]));
    let q = model.frame_decoder.init_queries(&mut tape, &vars, zero).unwrap();
    let pos: Tensor<f64> = model.store.get(model.frame_decoder.query_pos).cast();
    assert_eq!(tape.shape(q), &[5, 8]);
    assert_bitwise(tape.value(q), &pos, "query_pos");

    let s = tape.constant(random_tensor(&mut rng(6), &[1, 8]));
    let a = model.frame_decoder.init_queries(&mut tape, &vars, s).unwrap();
    let b = model.frame_decoder.init_queries(&mut tape, &vars, s).unwrap();
    assert_bitwise(tape.value(a), tape.value(b), "same sentence");
}

#[test]
fn text_features_influence_frame_queries() {
    let model = frame_model();
    let x = DecoderInputs::random(7, 2, 8);
    let silent = DecoderInputs {
        text: Tensor::zeros([4, 8]),
        sentence: Tensor::zeros([1, 8]),
        ..DecoderInputs::random(7, 2, 8)
    };
    assert!(x.decode(&model).max_abs_diff(&silent.decode(&model)) > 1e-3);
}

/// Finite differences through one layer of a component, over two random
/// elements of every parameter whose name starts with `prefix`.
fn one_layer_gradcheck<F>(model: &Model, prefix: &str, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> refquery::Result<Var>,
{
    let params: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.cast()).collect();
    let mut r = rng(11);
    let picks: Vec<(usize, usize)> = model
        .store
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with(prefix))
        .flat_map(|(i, (_, t))| {
            let n = t.numel();
            [r.gen_range(0..n), r.gen_range(0..n)].map(|e| (i, e))
        })
        .collect();
    assert!(picks.len() >= 20, "{prefix}: {} picks", picks.len());
    let report = finite_diff_check_subset(f, &params, 1e-5, 1e-3, &picks);
    assert!(report.passed(), "{prefix}: {report:?}");
}

fn readout(tape: &mut Tape<f64>, x: Var, seed: u64) -> refquery::Result<Var> {
    let w = random_tensor(&mut rng(seed), tape.shape(x));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn one_layer_model(fusion: FusionMode) -> Model {
    let mut cfg = config(8, 2, &[8, 8], 8, fusion);
    cfg.encoder.layers = 1;
    cfg.frame_decoder.layers = 1;
    cfg.video_decoder.layers = 1;
    Model::new(cfg, 21).unwrap()
}

#[test]
fn encoder_layer_gradients() {
    for fusion in [FusionMode::Deformable, FusionMode::Dense] {
        let mut model = one_layer_model(fusion);
        move_samples_off_grid(&mut model, 14);
        let inputs = random_inputs(&mut rng(12), 2, &[(4, 4), (2, 2)], &[8, 8], 3, 8);
        one_layer_gradcheck(&model, "encoder.", |t, v| {
            let fused = model.encoder.encode(t, v, &inputs)?;
            let a = readout(t, fused.visual, 1)?;
            let b = readout(t, fused.text, 2)?;
            t.add(a, b)
        });
    }
}

#[test]
fn frame_decoder_layer_gradients() {
    let model = one_layer_model(FusionMode::Dense);
    let x = DecoderInputs::random(13, 2, 8);
    one_layer_gradcheck(&model, "frame_decoder.", |t, v| {
        let fused = x.fused(t, 2);
        let q = model.frame_decoder.decode(t, v, &fused)?;
        readout(t, q, 3)
    });
}

#[test]
fn video_decoder_layer_gradients() {
    let model = one_layer_model(FusionMode::Dense);
    let mut r = rng(14);
    let (init, fq, text) = (
        random_tensor(&mut r, &[5, 8]),
        random_tensor(&mut r, &[10, 8]),
        random_tensor(&mut r, &[4, 8]),
    );
    one_layer_gradcheck(&model, "video_decoder.layers.", |t, v| {
        let (i, f, x) = (t.constant(init.clone()), t.constant(fq.clone()), t.constant(text.clone()));
        let q = model.video_decoder.decode(t, v, i, f, x)?;
        readout(t, q, 4)
    });
}

fn video_decode(model: &Model, init: &Tensor<f64>, fq: &Tensor<f64>, text: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let vars = model.store.bind(&mut tape);
    let (i, f, x) = (tape.constant(init.clone()), tape.constant(fq.clone()), tape.constant(text.clone()));
    let q = model.video_decoder.decode(&mut tape, &vars, i, f, x).unwrap();
    tape.value(q).clone()
}

#[test]
fn zeroed_video_decoder_outputs_keep_the_initial_queries() {
    let mut model = frame_model();
    assert!(zero_params(&mut model, "video_decoder.layers.", &[".out.", ".fc2."]) > 0);
    let mut r = rng(15);
    let init = random_tensor(&mut r, &[5, 8]);
    let fq = random_tensor(&mut r, &[15, 8]);
    let text = random_tensor(&mut r, &[3, 8]);
    assert_bitwise(&video_decode(&model, &init, &fq, &text), &init, "identity");
    // One frame whose queries are the initial queries themselves.
    assert_eq!(video_decode(&model, &init, &init, &text).shape(), &[5, 8]);
}

#[test]
fn video_decoder_ignores_frame_query_order() {
    let model = frame_model();
    let mut r = rng(16);
    let init = random_tensor(&mut r, &[5, 8]);
    let fq = random_tensor(&mut r, &[15, 8]);
    let text = random_tensor(&mut r, &[3, 8]);
    let mut perm: Vec<usize> = (0..15).collect();
    perm.shuffle(&mut r);
    let shuffled = Tensor::new([15, 8], perm.iter().flat_map(|&i| fq.row(i).to_vec()).collect()).unwrap();
    let a = video_decode(&model, &init, &fq, &text);
    let b = video_decode(&model, &init, &shuffled, &text);
    assert!(a.max_abs_diff(&b) <= 1e-6);
}

#[test]
fn mask_logits_are_bilinear() {
    let mut r = rng(17);
    let emb = random_tensor(&mut r, &[3, 8]);
    let feats = random_tensor(&mut r, &[20, 8]);
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(emb.clone());
    let f = tape.constant(feats);
    let l = mask_logits(&mut tape, e, f).unwrap();
    let e2 = tape.scale(e, 2.0);
    let l2 = mask_logits(&mut tape, e2, f).unwrap();
    let doubled = Tensor::from_fn([3, 20], |i| 2.0 * tape.value(l).data()[i]);
    assert_bitwise(tape.value(l2), &doubled, "doubled embedding");
    let e3 = tape.scale(e, 0.37);
    let l3 = mask_logits(&mut tape, e3, f).unwrap();
    for (a, b) in tape.value(l3).data().iter().zip(tape.value(l).data()) {
        assert!((a - 0.37 * b).abs() <= 1e-5 * (0.37 * b).abs().max(1e-12));
    }
}

#[test]
fn zero_embedding_gives_half_everywhere() {
    let mut tape = Tape::<f64>::new();
    let mut emb = random_tensor(&mut rng(18), &[2, 8]);
    emb.data_mut()[8..].iter_mut().for_each(|x| *x = 0.0);
    let e = tape.constant(emb);
    let f = tape.constant(random_tensor(&mut rng(19), &[12, 8]));
    let l = mask_logits(&mut tape, e, f).unwrap();
    let p = tape.sigmoid(l);
    assert!(tape.value(p).row(1).iter().all(|&x| x == 0.5));
}

#[test]
fn constant_feature_map_gives_constant_mask() {
    let mut r = rng(20);
    let c: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let emb = random_tensor(&mut r, &[3, 8]);
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(emb.clone());
    let f = tape.constant(Tensor::from_fn([16, 8], |i| c[i % 8]));
    let l = mask_logits(&mut tape, e, f).unwrap();
    for n in 0..3 {
        let want: f64 = emb.row(n).iter().zip(&c).map(|(a, b)| a * b).sum();
        assert!(tape.value(l).row(n).iter().all(|x| (x - want).abs() < 1e-12));
    }
}
