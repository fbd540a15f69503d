//! Learns persona embeddings from captions and clusters them.

use stlr::discbase::CnnConfig;
use stlr::judges::{self, Cut, Distance, Linkage, Pooling};
use stlr::textpipe::Vocabulary;

fn main() -> stlr::Result<()> {
    let personas = [
        ("curious", ["why", "wonder", "how"]),
        ("questioning", ["why", "wonder", "how"]),
        ("thrifty", ["cash", "price", "cheap"]),
        ("money-minded", ["cash", "price", "profit"]),
        ("serene", ["calm", "gentle", "quiet"]),
        ("peaceful", ["calm", "gentle", "still"]),
    ];
    let fillers = ["the", "view", "was", "here", "i", "saw", "it"];
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (name, words) in personas {
        for k in 0..60 {
            texts.push(format!("{} {} {} {}", fillers[k % 7], words[k % 3], fillers[(k * 3 + 1) % 7], words[(k + 2) % 3]));
            labels.push(name.to_string());
        }
    }
    let vocab = Vocabulary::build(&texts, 1, 100)?;
    let emb = judges::train_style_embedder(&texts, &labels, &vocab, &CnnConfig::default(), Pooling::HeadRows)?;
    println!("persona classifier accuracy {:.3} (low when personas overlap)", emb.heldout_accuracy);
    let r = judges::cluster_styles(&emb.embeddings, &emb.styles, Linkage::Average, Distance::Cosine, Cut::K(3))?;
    for g in &r.groups {
        println!("group: {}", g.iter().map(|&i| r.labels[i].as_str()).collect::<Vec<_>>().join(", "));
    }
    print!("{}", r.dendrogram_json()?);
    Ok(())
}
