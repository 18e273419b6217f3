//! Greedy decoding versus a width-2 beam on a scorer where the locally best
//! first token leads nowhere.

use unmt::decode::{beam, greedy, StepScorer};
use unmt::tokenizer::TokenId;

const EOS: TokenId = 0;
const NAMES: [&str; 3] = ["</s>", "a", "b"];

struct GardenPath;

impl StepScorer for GardenPath {
    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let logits: [f64; 3] = match prefix {
            [] => [-5.0, 0.2, 0.0],
            [2] => [5.0, -5.0, -5.0],
            _ => [0.0, 0.0, 0.0],
        };
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        logits.iter().map(|z| z - lse).collect()
    }
}

fn show(ids: &[TokenId]) -> String {
    ids.iter().map(|&i| NAMES[i as usize]).collect::<Vec<_>>().join(" ")
}

fn main() {
    let g = greedy(&GardenPath, EOS, 4);
    println!("greedy : {:<6} (stops after the first step)", show(&g));
    for width in [1, 2, 3] {
        let (ids, score) = beam(&GardenPath, EOS, width, 4);
        println!("beam {width} : {:<6} log-prob {score:.4}", show(&ids));
    }
}
