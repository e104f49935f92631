// scratch probe for picking acceptance-run hyperparameters; not shipped
use perturbkg_core::ablate::{apply_ablation, compute_split};
use perturbkg_core::trainer::Ablation;
use perturbkg_core::attn::source_type_mass_for_drugs;
use perturbkg_core::graph::NodeType;
use perturbkg_core::model::{load_model, AttentionScope, ModelConfig, ModelKind};
use perturbkg_core::rng::derive_labeled;
use perturbkg_core::synth::{generate, SynthParams};
use perturbkg_core::trainer::{split_sample_indices, train, SplitKind, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let params = SynthParams {
        seed: 42,
        ..SynthParams::default()
    };
    let (graph, dataset, _) = generate(&params).unwrap();
    println!("synth: {:?}", t0.elapsed());

    let mut proto = ModelConfig::for_graph(ModelKind::Gat, &graph, 64, 42);
    proto.embed_dim = 256;
    proto.enc_hidden = 1024;
    proto.delta_hidden = 1024;
    proto.heads = 4;
    proto.dropout = 0.1;
    proto.attention_scope = AttentionScope::AcrossTypes;

    let arg = |i: usize, d: f64| -> f64 {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(d)
    };
    let epochs = arg(1, 8.0) as usize;
    let batch = arg(2, 128.0) as usize;
    proto.dropout = arg(3, 0.1);
    let lr = arg(4, 0.001);
    if arg(5, 0.0) > 0.0 {
        proto.attention_scope = AttentionScope::PerType;
    }

    let out = tempfile::tempdir().unwrap();
    for split in [SplitKind::Scaffold, SplitKind::Random] {
        let assignment = compute_split(&graph, split, 0.8, 42).unwrap();
        let (tr, te) = split_sample_indices(&dataset, &assignment);
        println!("{split:?}: train {} test {}", tr.len(), te.len());
        let conditions: &[(ModelKind, Ablation)] = if split == SplitKind::Scaffold {
            &[
                (ModelKind::Mlp, Ablation::None),
                (ModelKind::MlpTargets, Ablation::None),
                (ModelKind::Gat, Ablation::None),
                (ModelKind::Gat, Ablation::EdgeShuffle),
                (ModelKind::Gat, Ablation::NodeRandomize),
            ]
        } else {
            &[
                (ModelKind::Mlp, Ablation::None),
                (ModelKind::Gat, Ablation::None),
            ]
        };
        for &(kind, ablation) in conditions {
            let t = Instant::now();
            let mut cfg = proto.clone();
            cfg.kind = kind;
            let mut tcfg = TrainConfig::new(kind, 42);
            tcfg.epochs = epochs;
            tcfg.batch_size = batch;
            tcfg.lr = lr;
            tcfg.split = split;
            tcfg.ablation = ablation;
            let ab_seed = derive_labeled(42, ablation.as_str(), &[]);
            let g_run = apply_ablation(&graph, ablation, ab_seed).unwrap();
            let dir = out
                .path()
                .join(format!("{}_{}_{}", split.as_str(), kind.as_str(), ablation.as_str()));
            let res = train(&g_run, &dataset, &cfg, &tcfg, &tr, &te, &dir).unwrap();
            let traj: Vec<String> = res
                .history
                .iter()
                .map(|r| format!("{:.3}", r.test_deg))
                .collect();
            println!("      traj: {}", traj.join(" "));
            let last = res.history.last().unwrap();
            println!(
                "  {:12} {:14} best_deg={:.4} (epoch {:2}) last: mse={:.4} pearson={:.4} deg={:.4}  [{:?}]",
                kind.as_str(),
                ablation.as_str(),
                res.best_test_deg,
                res.best_epoch,
                last.train_mse,
                last.test_pearson,
                last.test_deg,
                t.elapsed()
            );
            if kind == ModelKind::Gat && split == SplitKind::Scaffold {
                let (ck_cfg, store) = load_model(&res.checkpoint).unwrap();
                let test_drugs: Vec<u32> = {
                    let mut ids: Vec<u32> = te
                        .iter()
                        .map(|&i| {
                            let id = &dataset.samples[i].drug_id;
                            graph.index_of(id).unwrap().1
                        })
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                };
                let mass = source_type_mass_for_drugs(
                    &g_run, &ck_cfg, &store, &test_drugs, &tcfg.fanouts, 777,
                )
                .unwrap();
                let gp = mass.get(&NodeType::GeneProtein).copied().unwrap_or(0.0);
                println!("      attention mass: gene_protein={gp:.4} full={mass:?}");
            }
        }
    }
    println!("total: {:?}", t0.elapsed());
}
