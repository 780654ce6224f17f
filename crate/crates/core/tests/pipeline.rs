use ovseg::cluster::{cluster_features, partition_agreement};
use ovseg::dataio::Synonyms;
use ovseg::fixtures::{synth_bundle, SynthSpec};
use ovseg::inference::semantic_project;
use ovseg::metrics::{pq_accumulate, pq_report, PqAccumulator, SemanticAccumulator};
use ovseg::pipeline::{
    ablation_scene, finish, oracle_outputs, score_scene, vocabulary_overlap, EnsembleMode, PipelineConfig, SceneSegment,
};

fn scene_scores(seed: u64) -> (f64, f64, f64) {
    let s = ablation_scene(seed).unwrap();
    let mase = score_scene(&s, 0.8, 0.4, EnsembleMode::Mase).unwrap();
    let geo = score_scene(&s, 0.8, 0.4, EnsembleMode::Geometric).unwrap();
    let ldp_only = score_scene(&s, 0.0, 0.0, EnsembleMode::Geometric).unwrap();
    let clip_only = score_scene(&s, 1.0, 1.0, EnsembleMode::Geometric).unwrap();
    (mase, geo, ldp_only.max(clip_only))
}

#[test]
fn ablation_ordering_holds_on_every_scene() {
    let mut strict = 0;
    for seed in 0..20 {
        let (mase, geo, single) = scene_scores(seed);
        assert!(mase >= geo && geo >= single, "seed {seed}: {mase} {geo} {single}");
        if mase > geo {
            strict += 1;
        }
    }
    assert!(strict >= 15, "strict on {strict}/20");
}

#[test]
fn ablation_scene_is_seeded() {
    assert_eq!(ablation_scene(3).unwrap(), ablation_scene(3).unwrap());
    let s = ablation_scene(3).unwrap();
    assert_eq!(s.kinds.iter().filter(|k| **k == SceneSegment::Seen).count(), 2);
}

/// Best agreement over all label permutations, by enumeration.
fn agreement_by_permutation(a: &[usize], b: &[usize], k: usize) -> f64 {
    fn go(i: usize, k: usize, used: &mut Vec<bool>, perm: &mut Vec<usize>, table: &[Vec<u64>], best: &mut u64) {
        if i == k {
            let hits = (0..k).map(|r| table[r][perm[r]]).sum();
            *best = (*best).max(hits);
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                go(i + 1, k, used, perm, table, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut table = vec![vec![0u64; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let mut best = 0;
    go(0, k, &mut vec![false; k], &mut Vec::new(), &table, &mut best);
    best as f64 / a.len() as f64
}

#[test]
fn clustering_recovers_synthetic_partition() {
    let spec = SynthSpec::default();
    for seed in 0..6 {
        let (bundle, gt) = synth_bundle(seed, &spec).unwrap();
        let k = gt.len();
        let mut truth = vec![0usize; gt.height * gt.width];
        for (i, m) in gt.masks.iter().enumerate() {
            for (p, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                truth[p] = i;
            }
        }
        let labels = cluster_features(&bundle.f_sam, k, seed, 100)
            .unwrap()
            .upsample(gt.height, gt.width, 16);
        let got = partition_agreement(&labels, &truth).unwrap();
        let want = agreement_by_permutation(&labels, &truth, k);
        assert!((got - want).abs() < 1e-15);
        assert!(got >= 0.95, "seed {seed}: agreement {got}");
    }
}

#[test]
fn oracle_decoder_reaches_the_ceiling() {
    for (seed, spec) in [
        (0, SynthSpec::default()),
        (
            1,
            SynthSpec {
                c_test: 10,
                n_gt_segments: 6,
                ..SynthSpec::default()
            },
        ),
        (
            2,
            SynthSpec {
                image_h: 48,
                image_w: 80,
                ..SynthSpec::default()
            },
        ),
        (
            3,
            SynthSpec {
                n_gt_segments: 2,
                ..SynthSpec::default()
            },
        ),
    ] {
        let (bundle, gt) = synth_bundle(seed, &spec).unwrap();
        let vocab = &bundle.vocabulary;
        let (preds, emb) = oracle_outputs(&gt, &bundle, 5).unwrap();
        let overlap = vocabulary_overlap(vocab, &Synonyms::default());
        let r = finish(&bundle, &preds, &emb, &overlap, 0.07, 0.07, &PipelineConfig::default()).unwrap();
        let expected = gt.to_panoptic(vocab).unwrap();
        let mut acc = PqAccumulator::new(vocab, overlap).unwrap();
        pq_accumulate(&mut acc, &r.panoptic, &expected, vocab).unwrap();
        assert_eq!(pq_report(&acc, vocab).all.pq, 1.0, "seed {seed}");
        let mut sem = SemanticAccumulator::new(vocab.len());
        sem.add(
            &semantic_project(&r.panoptic, vocab).unwrap(),
            &semantic_project(&expected, vocab).unwrap(),
        )
        .unwrap();
        assert_eq!(sem.report().miou, 1.0, "seed {seed}");
    }
}
