//! Writes the bundled synthetic datasets and offline fixtures.
//!
//!     cargo run -p kgfuse-core --example gen_data -- [out_dir]

use std::path::PathBuf;

use kgfuse_core::kg::{load_dataset, write_dataset, DatasetSplit};
use kgfuse_core::synthetic::{self, ConceptEmbedder};
use kgfuse_core::text::backend::{write_chat_fixture, FixtureEmbedder};
use kgfuse_core::text::{build_prompts, records_for_split};

pub const SEED: u64 = 0;
pub const TEXT_DIM: usize = 32;

fn main() -> kgfuse_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let fixtures = out.join("fixtures");
    let splits: Vec<DatasetSplit> = vec![
        synthetic::kinship_split(12, SEED)?,
        synthetic::organization_split(SEED)?,
        synthetic::kinship_paraphrase_split(SEED)?,
        synthetic::paraphrase_training_split(8, SEED)?,
    ];
    for split in &splits {
        let dir = out.join(&split.name);
        write_dataset(&dir, split)?;
        let (loaded, report) = load_dataset(&dir)?;
        let records = records_for_split(&loaded);
        for prompt in build_prompts(&records, 500) {
            let batch: Vec<_> = records.iter().filter(|r| prompt.relations.contains(&r.raw_identifier)).cloned().collect();
            write_chat_fixture(&fixtures, &prompt.system, &prompt.user, &synthetic::enrichment_reply(&batch))?;
        }
        println!("{}: {report:?}", dir.display());
    }
    let table = ConceptEmbedder::new(TEXT_DIM, 0.2, SEED).fixture_table();
    FixtureEmbedder::from_table(table.into_iter().collect()).save(&fixtures.join("embeddings.json"))?;
    println!("fixtures in {}", fixtures.display());
    Ok(())
}
