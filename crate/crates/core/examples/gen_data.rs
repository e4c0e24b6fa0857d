//! Generate a synthetic clean corpus and a labeled task.
//!
//! Usage: `cargo run --example gen_data -- [out_dir]`

mod shared;

use contamlab::lab;
use contamlab::textdata::{write_corpus, write_labeled_tsv};

fn main() -> contamlab::Result<()> {
    shared::init_logging();
    let out = shared::out_dir("example-out");
    let cell = shared::quick_cell();
    let data = lab::build_data(&cell)?;
    write_corpus(&out.join("clean.txt"), &data.clean)?;
    write_labeled_tsv(&out.join("train.tsv"), &data.task.train)?;
    write_labeled_tsv(&out.join("test.tsv"), &data.task.test)?;
    println!("{} clean lines, {} train and {} test examples, {} classes", data.clean.len(), data.task.train.len(), data.task.test.len(), data.task.num_classes);
    for e in data.task.test.iter().take(3) {
        println!("  [{}] {}", e.verbalizer, e.text);
    }
    println!("vocabulary: {} tokens", data.vocab.len());
    Ok(())
}
