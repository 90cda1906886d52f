// SPDX-License-Identifier: MIT OR Apache-2.0

//! Couplet synthesis through a text-generation provider.
//!
//! With `PLANSITE_PROVIDER_API_KEY` set and an endpoint and model given on
//! the command line, an HTTP provider is used; otherwise canned replies.
//!
//! `cargo run --example synthesize_couplets -- https://api.example/v1/chat/completions some-model`

use plansite::corpus::{
    synthesize_couplets, CoupletProvider, HttpProvider, RecordedProvider, SynthesisSpec,
    PROVIDER_KEY_ENV,
};
use plansite::phonology::PronunciationLexicon;

fn main() -> plansite::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let provider: Box<dyn CoupletProvider> = match (&args[..], std::env::var(PROVIDER_KEY_ENV)) {
        ([endpoint, model], Ok(_)) => Box::new(HttpProvider::from_env(endpoint, model)),
        _ => Box::new(RecordedProvider::new(vec![
            "The sky grew dark with summer rain,\nit drummed against the window pane.".into(),
            "A quiet house beneath the hill,\nthe evening air was cold and still.".into(),
            "I walked along the sandy shore,\nand heard the distant ocean's roar.".into(),
            "This line has no partner at all".into(),
        ])),
    };
    let spec = SynthesisSpec {
        count: 3,
        topics: vec!["weather".into(), "home".into(), "the sea".into()],
        ..SynthesisSpec::default()
    };
    let report = synthesize_couplets(provider.as_ref(), &spec, &PronunciationLexicon::bundled())?;
    for c in &report.couplets {
        println!("[{}] {} / {}  ({} ~ {})", c.topic, c.line1, c.line2, c.r1, c.r2);
    }
    for (id, why) in &report.rejected {
        println!("rejected {id}: {why}");
    }
    println!("yield {:.2} over {} attempts", report.yield_rate(), report.attempts);
    Ok(())
}
