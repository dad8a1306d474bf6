//! Word error rate with an explicit alignment.
//!
//! Run with `cargo run --example wer_scoring ["reference" "hypothesis"]`.

use transducer::eval::{align, word_error_rate, words, EditOp};

fn show(reference: &str, hyp: &str) -> transducer::Result<()> {
    let report = word_error_rate(reference, hyp)?;
    let (r, h) = (words(reference), words(hyp));
    let (mut i, mut j) = (0, 0);
    let mut line = Vec::new();
    for op in align(&r, &h) {
        line.push(match op {
            EditOp::Match => {
                i += 1;
                j += 1;
                r[i - 1].clone()
            }
            EditOp::Substitute => {
                i += 1;
                j += 1;
                format!("{}->{}", r[i - 1], h[j - 1])
            }
            EditOp::Insert => {
                j += 1;
                format!("+{}", h[j - 1])
            }
            EditOp::Delete => {
                i += 1;
                format!("-{}", r[i - 1])
            }
        });
    }
    println!("ref {reference:?}\nhyp {hyp:?}\n    {}", line.join(" "));
    println!(
        "    S={} I={} D={} N={} WER={:.3}\n",
        report.substitutions, report.insertions, report.deletions, report.reference_words, report.wer
    );
    Ok(())
}

fn main() -> transducer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [reference, hyp] = args.as_slice() {
        return show(reference, hyp);
    }
    show("a b c", "a b c")?;
    show("a b c", "a c")?;
    show("a", "b c")?;
    show("The cat sat on the mat", "the cat sat on mat today")?;
    if let Err(e) = word_error_rate("", "anything") {
        println!("empty reference: {e}");
    }
    Ok(())
}
