//! Parsing generated streams into activation decisions, including malformed
//! signal runs that degrade to deactivation.

use candle_core::{DType, Device, Tensor};
use nxgpt::config::{Modality, SignalCounts};
use nxgpt::error::Result;
use nxgpt::llm::GeneratedStream;
use nxgpt::routing::parse_stream;
use nxgpt::tokenizer::{tokenize, SignalVocabulary};

fn show(label: &str, ids: Vec<u32>, vocab: &SignalVocabulary) -> Result<()> {
    let n = ids.len();
    let stream = GeneratedStream { ids, hidden: Tensor::zeros((n, 4), DType::F32, &Device::Cpu)? };
    let d = parse_stream(&stream, vocab)?;
    println!("{label}");
    println!("  stream:      {}", vocab.render(&stream.ids));
    println!("  text:        {:?}", d.text);
    println!("  activated:   {:?}", d.activated());
    for v in &d.violations {
        println!("  violation:   {}", serde_json::to_string(v)?);
    }
    Ok(())
}

fn main() -> Result<()> {
    let vocab = SignalVocabulary::new(SignalCounts::default());
    let img = vocab.run(Modality::Image);
    let aud = vocab.run(Modality::Audio);

    let mut ids = tokenize("sure! ")?;
    ids.extend(&img);
    show("complete image run", ids, &vocab)?;

    let mut ids = tokenize("here you go ")?;
    ids.extend(&aud);
    ids.extend(&img);
    show("audio and image", ids, &vocab)?;

    show("plain text", tokenize("nothing to draw")?, &vocab)?;

    let ids = vec![img[0], img[2], img[1], img[3], img[4]];
    show("out of order", ids, &vocab)?;

    let mut ids = aud[..4].to_vec();
    ids.extend(tokenize(" oops")?);
    show("truncated", ids, &vocab)?;

    let mut ids = img.clone();
    ids.extend(&img);
    show("repeated", ids, &vocab)?;
    Ok(())
}
