mod common;

use std::collections::BTreeMap;

use common::{random_image, rng, toy_bundle};
use rand::Rng;
use vlchat::model::{
    assemble_multimodal, embed_tokens, encode_image, expected_shapes, init_encoder, init_projector,
    lm_forward, pool_and_project, sample_loss, ImageInput, KvCache, Params, Partition, Weights,
};
use vlchat::text::{render_chat, ChatTurn, Special, Vocab};
use vlchat::{Error, Graph, ModelBundle, StackConfig, Tensor};

fn frozen<F: vlchat::Scalar>(g: &mut Graph<F>, b: &ModelBundle<F>) -> Params {
    Params::bind(g, &b.weights, &[])
}

#[test]
fn full_geometry_784_patches_pool_to_128_tokens_of_width_5120() {
    let mut cfg = StackConfig::full();
    assert_eq!(cfg.num_patches(), 784);
    assert_eq!(cfg.pool_latents, 128);
    assert_eq!(cfg.pool_dim, 768);
    assert_eq!(cfg.lm_dim, 5120);
    let shapes = expected_shapes(&cfg);
    assert_eq!(shapes["encoder.pos"], vec![784, 1024]);
    assert_eq!(shapes["projector.latents"], vec![128, 768]);
    assert_eq!(shapes["projector.mlp.w2"], vec![5120, 5120]);
    assert_eq!(shapes["lm.embed"], vec![cfg.vocab_size, 5120]);
    assert_eq!(shapes.keys().filter(|k| k.ends_with(".attn.wq")).count(), 24 + 40);

    // Real patch grid, latent count and widths; a narrow single-layer encoder
    // keeps the run cheap.
    cfg.enc_layers = 1;
    cfg.enc_dim = 32;
    cfg.enc_heads = 2;
    cfg.enc_ffn = 64;
    let mut w: Weights<f32> = BTreeMap::new();
    init_encoder(&cfg, 0, &mut w);
    init_projector(&cfg, 0, &mut w);
    let mut g = Graph::new();
    let p = Params::bind(&mut g, &w, &[]);
    let img = random_image::<f32>(&cfg, &mut rng(0));
    let patches = encode_image(&mut g, &p, &cfg, &img).unwrap();
    assert_eq!(g.shape(patches), &[784, 32]);
    let tokens = pool_and_project(&mut g, &p, &cfg, patches).unwrap();
    assert_eq!(g.shape(tokens), &[128, 5120]);
    assert!(g.value(tokens).all_finite());
}

#[test]
fn toy_geometry_64_patches_pool_to_8_tokens() {
    let b = toy_bundle::<f32>(1);
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);
    let img = random_image::<f32>(&b.config, &mut rng(1));
    let patches = encode_image(&mut g, &p, &b.config, &img).unwrap();
    assert_eq!(g.shape(patches), &[64, 64]);
    let tokens = pool_and_project(&mut g, &p, &b.config, patches).unwrap();
    assert_eq!(g.shape(tokens), &[8, 128]);
}

#[test]
fn pooling_length_is_independent_of_patch_count() {
    let b = toy_bundle::<f32>(2);
    let mut r = rng(2);
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);
    for n in [1usize, 2, 7, 64, 128] {
        let x = g.constant(Tensor::randn(&[n, 64], 1.0, &mut r));
        let y = pool_and_project(&mut g, &p, &b.config, x).unwrap();
        assert_eq!(g.shape(y), &[8, 128], "N = {n}");
    }
    let empty = g.constant(Tensor::zeros(&[0, 64]));
    assert!(matches!(
        pool_and_project(&mut g, &p, &b.config, empty),
        Err(Error::Input(_))
    ));
}

#[test]
fn permuting_two_patches_changes_encoder_output() {
    let b = toy_bundle::<f32>(3);
    let cfg = &b.config;
    let img = random_image::<f32>(cfg, &mut rng(3));
    // swap the top-left and bottom-right 8×8 patches
    let mut swapped = img.clone();
    let (s, ps) = (cfg.image_size, cfg.patch_size);
    {
        let d = swapped.data_mut();
        for c in 0..3 {
            for y in 0..ps {
                for x in 0..ps {
                    let a = (c * s + y) * s + x;
                    let z = (c * s + s - ps + y) * s + s - ps + x;
                    d.swap(a, z);
                }
            }
        }
    }
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);
    let a = encode_image(&mut g, &p, cfg, &img).unwrap();
    let z = encode_image(&mut g, &p, cfg, &swapped).unwrap();
    let (a, z) = (g.value(a), g.value(z));
    // Without positions, the swapped run would equal the original with rows
    // 0 and 63 exchanged.
    let row = |t: &Tensor<f32>, i: usize| t.data()[i * 64..(i + 1) * 64].to_vec();
    assert_ne!(row(a, 0), row(z, 63));
    assert_ne!(row(a, 5), row(z, 5));
}

#[test]
fn lm_logits_shape_and_context_limit() {
    let b = toy_bundle::<f32>(4);
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);
    let ids: Vec<u32> = (0..37).map(|i| (i * 7 % 256) as u32).collect();
    let e = embed_tokens(&mut g, &p, &ids).unwrap();
    let logits = lm_forward(&mut g, &p, &b.config, e, None).unwrap();
    assert_eq!(g.shape(logits), &[37, b.vocab.len()]);

    let long = vec![65u32; b.config.ctx_limit + 1];
    let e = embed_tokens(&mut g, &p, &long).unwrap();
    assert!(matches!(
        lm_forward(&mut g, &p, &b.config, e, None),
        Err(Error::ContextLength { len: 513, limit: 512 })
    ));
}

#[test]
fn causal_invariance_is_bitwise() {
    let b = toy_bundle::<f32>(5);
    let mut r = rng(5);
    let t = 24;
    let base: Vec<u32> = (0..t).map(|_| r.gen_range(0..256)).collect();
    let logits = |ids: &[u32]| {
        let mut g = Graph::new();
        let p = frozen(&mut g, &b);
        let e = embed_tokens(&mut g, &p, ids).unwrap();
        let l = lm_forward(&mut g, &p, &b.config, e, None).unwrap();
        g.value(l).clone()
    };
    let reference = logits(&base);
    let v = b.vocab.len();
    for i in [0usize, 3, 11, 22] {
        let mut changed = base.clone();
        for id in changed.iter_mut().skip(i + 1) {
            *id = r.gen_range(0..256);
        }
        let out = logits(&changed);
        let prefix = (i + 1) * v;
        let same = reference.data()[..prefix]
            .iter()
            .zip(&out.data()[..prefix])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "logits at positions <= {i} moved");
        assert_ne!(reference.data()[prefix..], out.data()[prefix..]);
    }
}

#[test]
fn cached_forward_matches_uncached() {
    let b = toy_bundle::<f64>(6);
    let mut r = rng(6);
    let ids: Vec<u32> = (0..19).map(|_| r.gen_range(0..256)).collect();
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);
    let e = embed_tokens(&mut g, &p, &ids).unwrap();
    let full = lm_forward(&mut g, &p, &b.config, e, None).unwrap();
    let full = g.value(full).clone();

    let mut cache = KvCache::new(&b.config);
    let mut rows = Vec::new();
    for chunk in [&ids[..7], &ids[7..8], &ids[8..15], &ids[15..]] {
        let e = embed_tokens(&mut g, &p, chunk).unwrap();
        let l = lm_forward(&mut g, &p, &b.config, e, Some(&mut cache)).unwrap();
        rows.extend_from_slice(g.value(l).data());
    }
    assert_eq!(cache.len(), 19);
    let worst = full
        .data()
        .iter()
        .zip(&rows)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst}");
}

#[test]
fn assembly_expands_each_placeholder_to_k_tokens() {
    let b = toy_bundle::<f32>(7);
    let vocab = &b.vocab;
    let k = b.config.pool_latents;
    let mut g = Graph::new();
    let p = frozen(&mut g, &b);

    // No images: pure text path.
    let s = render_chat(vocab, &[ChatTurn::user("hi", 0), ChatTurn::assistant("yo")], 512, k).unwrap();
    let a = assemble_multimodal(&mut g, &p, &s, &[]).unwrap();
    assert_eq!(a.len(), s.ids.len());
    let text = embed_tokens(&mut g, &p, &s.ids).unwrap();
    assert!(g.value(a.embeddings).bit_eq(g.value(text)));

    // One image, 20 text-side tokens → 20 − 1 + 8 = 27.
    let turns = [ChatTurn::user("what shape", 1), ChatTurn::assistant("disk.")];
    let s = render_chat(vocab, &turns, 512, k).unwrap();
    assert_eq!(s.ids.len(), 20);
    let img = g.constant(Tensor::full(&[k, 128], 0.5));
    let a = assemble_multimodal(&mut g, &p, &s, &[img]).unwrap();
    assert_eq!(a.len(), 27);
    assert_eq!(g.shape(a.embeddings), &[27, 128]);
    assert_eq!(a.loss_mask.len(), 27);
    assert_eq!(a.loss_mask.iter().filter(|&&m| m).count(), s.masked_count());

    // Two images around a separator: both expansions present, separator
    // embedding untouched.
    let turns = [ChatTurn::user("compare", 2), ChatTurn::assistant("same")];
    let s = render_chat(vocab, &turns, 512, k).unwrap();
    let (i0, i1) = (s.image_slots[0], s.image_slots[1]);
    assert_eq!(i1, i0 + 2);
    assert_eq!(s.ids[i0 + 1], Special::NewlineSep.id());
    let im0 = g.constant(Tensor::full(&[k, 128], 1.0));
    let im1 = g.constant(Tensor::full(&[k, 128], -1.0));
    let a = assemble_multimodal(&mut g, &p, &s, &[im0, im1]).unwrap();
    assert_eq!(a.len(), s.ids.len() + 2 * (k - 1));
    let e = g.value(a.embeddings);
    let row = |i: usize| &e.data()[i * 128..(i + 1) * 128];
    for j in 0..k {
        assert!(row(i0 + j).iter().all(|&v| v == 1.0));
        assert!(row(i0 + k + 1 + j).iter().all(|&v| v == -1.0));
    }
    let sep = &b.weights["lm.embed"].data()
        [Special::NewlineSep.id() as usize * 128..(Special::NewlineSep.id() as usize + 1) * 128];
    assert_eq!(row(i0 + k), sep);
    assert_eq!(a.tokens[i0 + k], Some(Special::NewlineSep.id()));
    assert!(!a.loss_mask[i0..i0 + 2 * k + 1].iter().any(|&m| m));

    assert!(matches!(
        assemble_multimodal(&mut g, &p, &s, &[im0]),
        Err(Error::Pairing { images: 1, slots: 2 })
    ));
}

/// FD check of the whole-sample loss with respect to the most sensitive
/// entries of one tensor from each partition.
#[test]
fn end_to_end_gradient_matches_finite_differences_per_partition() {
    let b = toy_bundle::<f64>(8);
    let cfg = b.config.clone();
    let turns = [ChatTurn::user("colour?", 1), ChatTurn::assistant("a red disc")];
    let sample = render_chat(&b.vocab, &turns, cfg.ctx_limit, cfg.pool_latents).unwrap();
    let img = ImageInput::Pixels(random_image::<f64>(&cfg, &mut rng(8)));
    let images = [img];
    let loss_of = |w: &Weights<f64>| {
        let mut g = Graph::new();
        let p = Params::bind(&mut g, w, &[]);
        let l = sample_loss(&mut g, &p, &cfg, &sample, &images).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let p = Params::bind(&mut g, &b.weights, &Partition::ALL);
    let loss = sample_loss(&mut g, &p, &cfg, &sample, &images).unwrap();
    g.backward(loss).unwrap();

    for name in ["encoder.blocks.1.attn.wv", "projector.layers.0.wk", "lm.blocks.2.mlp.w1"] {
        let var = p.get(name).unwrap();
        let analytic = g.grad(var).unwrap().to_vec();
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.sort_by(|&i, &j| analytic[j].abs().total_cmp(&analytic[i].abs()));
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0, 0.0);
        for &j in order.iter().take(6) {
            let mut w = b.weights.clone();
            w.get_mut(name).unwrap().data_mut()[j] += h;
            let up = loss_of(&w);
            w.get_mut(name).unwrap().data_mut()[j] -= 2.0 * h;
            let down = loss_of(&w);
            let numeric = (up - down) / (2.0 * h);
            diff += (numeric - analytic[j]).powi(2);
            norm += numeric * numeric;
        }
        let rel = (diff / norm).sqrt();
        assert!(rel < 1e-3, "{name}: relative error {rel}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::train(["the red circle and the blue square"], 12);
    let mut cfg = StackConfig::toy();
    cfg.vocab_size = vocab.len();
    cfg.tie_embeddings = true;
    let b = ModelBundle::<f32>::init(cfg, vocab, 9).unwrap();
    let path = dir.path().join("m.mmf");
    b.save(&path).unwrap();
    let back = ModelBundle::<f32>::load(&path).unwrap();
    assert_eq!(back.config, b.config);
    assert_eq!(back.vocab, b.vocab);
    assert_eq!(back.weights.len(), b.weights.len());
    for (name, t) in &b.weights {
        assert!(back.weights[name].bit_eq(t), "{name}");
    }
    for part in Partition::ALL {
        assert_eq!(back.partition_hash(part), b.partition_hash(part));
    }
    assert!(!path.with_extension("partial").exists());
}

#[test]
fn bundle_validation_rejects_bad_weights() {
    let mut b = toy_bundle::<f32>(10);
    b.weights.insert("lm.extra".into(), Tensor::zeros(&[1]));
    assert!(matches!(b.validate(), Err(Error::Config(_))));
    b.weights.remove("lm.extra");
    b.weights.insert("lm.ln_f.g".into(), Tensor::zeros(&[3]));
    assert!(matches!(b.validate(), Err(Error::Config(_))));
    b.weights.remove("lm.ln_f.g");
    assert!(matches!(b.validate(), Err(Error::Config(_))));
    let total: usize = Partition::ALL.iter().map(|&p| b.num_params(Some(p))).sum();
    assert_eq!(total, b.num_params(None));
}
