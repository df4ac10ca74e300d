//! Align rationales with behavioral text in the shared Thought Space and
//! measure how far training moves matched pairs ahead of mismatched ones.
//!
//!     cargo run --release --example thought_space_alignment

use std::collections::BTreeMap;

use pulse::data::synth::SynthSpec;
use pulse::data::{self, build_sequences, preprocess_core, split_leave_one_out};
use pulse::rationale::backend::{GenerationBackend, GenerationRequest, MockBackend};
use pulse::rationale::{build_phase1_prompt, Rationale};
use pulse::thought::{agreement_score, build_behavior_text, train_thought_space, ThoughtSpaceConfig};

fn main() -> pulse::Result<()> {
    let spec = SynthSpec {
        n_users: 60,
        n_items: 40,
        n_traits: 4,
        noise: 0.0,
        seq_len_range: (8, 10),
        seed: 5,
        ..SynthSpec::default()
    };
    let (records, catalog, _) = data::synth::gen_synthetic_dataset(&spec)?;
    let split = split_leave_one_out(&build_sequences(&preprocess_core(&records)?))?;

    // One base rationale and one train-side behavior text per user. The
    // mock backend stands in for an instruction-tuned generator.
    let backend = MockBackend::synthetic(9);
    let mut positives: BTreeMap<String, Rationale> = BTreeMap::new();
    let mut behaviors = BTreeMap::new();
    for (user, seq) in &split.users {
        let parts = split.parts(user)?;
        let prompt = build_phase1_prompt(&catalog, seq, parts.train.len(), parts.val)?;
        let text = backend
            .generate(&GenerationRequest { prompt, max_tokens: 256, temperature: 0.7, seed: Some(1) })?
            .text;
        positives.insert(
            user.clone(),
            Rationale { source_user: user.clone(), kind: pulse::rationale::RationaleKind::Base, tree_pos: None, text },
        );
        behaviors.insert(
            user.clone(),
            build_behavior_text(seq, parts.train.len(), parts.val, &catalog)?,
        );
    }

    let config = ThoughtSpaceConfig {
        epochs: 3,
        batch_size: 8,
        lr_encoders: 1e-3,
        ..ThoughtSpaceConfig::default()
    };
    let (space, curve) = train_thought_space(&positives, &behaviors, &config, None)?;
    for (epoch, loss) in curve.iter().enumerate() {
        println!("epoch {}  contrastive loss {:.4}", epoch + 1, loss);
    }

    // Matched pairs should now score above pairs from different users.
    let users: Vec<&String> = positives.keys().collect();
    let mut matched = 0.0f64;
    let mut crossed = 0.0f64;
    for (i, user) in users.iter().enumerate() {
        let other = users[(i + 1) % users.len()];
        matched += f64::from(agreement_score(&space, &positives[*user].text, &behaviors[*user].text)?);
        crossed += f64::from(agreement_score(&space, &positives[*user].text, &behaviors[other].text)?);
    }
    let n = users.len() as f64;
    println!("mean agreement, matched pairs:    {:.3}", matched / n);
    println!("mean agreement, mismatched pairs: {:.3}", crossed / n);
    println!("separation: {:.3}", (matched - crossed) / n);
    Ok(())
}
