//! Overlap metrics, judge-based ratios and quadrant counts on toy inputs.

use stlr::evalsuite;

fn main() -> stlr::Result<()> {
    let hyps = ["amy baked bread .", "ben sadly hiked ."];
    let refs = ["amy baked a cake .", "ben hiked the trail ."];
    println!("bleu1   {:.4}", evalsuite::bleu1(&hyps, &refs)?);
    println!("rougeL  {:.4}", evalsuite::rouge_l(&hyps, &refs)?);
    println!("cider   {:.4}", evalsuite::cider(&hyps, &refs)?);
    println!("ris     {:.4}", evalsuite::ris_from_scores(&[0.9, 0.4, 0.6], 0.5)?);
    println!("better  {:.4}", evalsuite::better_ratio(&[0.8, 0.3, 0.5], &[0.2, 0.7, 0.5])?);
    let q = evalsuite::quadrants(&[true, true, false], &[true, false, true])?;
    println!("quadrants {q:?} P(valid|styled) {:?}", q.p_valid_given_styled());
    Ok(())
}
