//! Train the sequential backbone on a synthetic corpus and watch validation
//! HR@1 climb as it picks up the planted trait structure.
//!
//!     cargo run --release --example backbone_training

use pulse::data::synth::SynthSpec;
use pulse::data::{self, build_sequences, preprocess_core, sample_all_candidates, split_leave_one_out};
use pulse::backbone::{backbone_hr_at_1, train_backbone};
use pulse::backbone::BackboneConfig;

fn main() -> pulse::Result<()> {
    let spec = SynthSpec {
        n_users: 40,
        n_items: 32,
        n_traits: 4,
        noise: 0.0,
        seq_len_range: (8, 10),
        seed: 5,
        ..SynthSpec::default()
    };
    let (records, catalog, _) = data::synth::gen_synthetic_dataset(&spec)?;
    let split = split_leave_one_out(&build_sequences(&preprocess_core(&records)?))?;
    let universe: Vec<String> = catalog.items.keys().cloned().collect();
    let val = sample_all_candidates(&split, &universe, "val", spec.seed)?;
    let test = sample_all_candidates(&split, &universe, "test", spec.seed)?;

    let config = BackboneConfig {
        epochs: 6,
        patience: 6,
        batch_size: 8,
        max_len: 10,
        ..BackboneConfig::default()
    };
    let (model, curve) = train_backbone(&split, &val, &catalog, config, 0)?;
    for (epoch, hr) in curve.iter().enumerate() {
        println!("epoch {:>2}  val HR@1 {:.3}", epoch + 1, hr);
    }

    // Test histories end one item later than validation ones.
    let mut histories = std::collections::BTreeMap::new();
    for (user, seq) in &split.users {
        histories.insert(user.clone(), seq.items[..seq.len() - 1].to_vec());
    }
    println!("test HR@1 {:.3}", backbone_hr_at_1(&model, &histories, &test)?);

    // The learned item embeddings also give user vectors for the k-similar
    // lookup used in rationale prompts.
    let user = split.users.keys().next().expect("at least one user");
    let emb = model.user_embedding(&split.users[user].items[..6])?;
    println!("{user} embedding head: {:?}", &emb[..4.min(emb.len())]);
    Ok(())
}
