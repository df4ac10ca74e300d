//! Generate a planted-preference corpus, run the preprocessing protocol,
//! and inspect one user's split and candidate slate.
//!
//!     cargo run --example synthetic_data

use pulse::data::synth::SynthSpec;
use pulse::data::{self, build_sequences, preprocess_core, sample_all_candidates, split_leave_one_out};

fn main() -> pulse::Result<()> {
    let spec = SynthSpec {
        n_users: 40,
        n_items: 32,
        n_traits: 4,
        noise: 0.1,
        seq_len_range: (8, 12),
        seed: 7,
        ..SynthSpec::default()
    };
    let (records, catalog, assignments) = data::synth::gen_synthetic_dataset(&spec)?;
    println!(
        "corpus: {} interactions, {} items, {} users",
        records.len(),
        catalog.items.len(),
        spec.n_users
    );

    // Dedup, iterative 5-core, chronological ordering.
    let core = preprocess_core(&records)?;
    let sequences = build_sequences(&core);
    let split = split_leave_one_out(&sequences)?;
    println!(
        "after preprocessing: {} interactions, {} users survive the 5-core",
        core.len(),
        split.users.len()
    );

    let user = split.users.keys().next().expect("at least one user");
    let parts = split.parts(user)?;
    println!(
        "\n{user} (planted trait {:?})",
        assignments.user_trait_word(user).unwrap_or("?")
    );
    println!("  train ({} items): {:?} ...", parts.train.len(), &parts.train[..3.min(parts.train.len())]);
    println!("  val:  {}", parts.val);
    println!("  test: {}", parts.test);

    // One slate: the ground truth hides among 9 sampled negatives.
    let universe: Vec<String> = catalog.items.keys().cloned().collect();
    let slate = &sample_all_candidates(&split, &universe, "test", spec.seed)?[user];
    println!("\ntest slate for {user}:");
    for (i, item) in slate.candidates.iter().enumerate() {
        let marker = if i == slate.ground_truth_index { " <- ground truth" } else { "" };
        println!("  [{i}] {} ({}){marker}", catalog.items[item].title, item);
    }
    Ok(())
}
