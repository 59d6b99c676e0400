//! Which advantage / log-probability pairs are accepted, and how an
//! advantage is broadcast down to the log-probability units.

use chunkrl::granularity::{aggregate_logprob, broadcast_advantage, GranularitySpec, Level};

fn main() {
    let levels = [Level::Chunk, Level::Action, Level::Token];
    println!(
        "{:<14}{:>14}{:>14}{:>14}",
        "adv \\ logprob", "chunk", "action", "token"
    );
    for adv in [Level::Chunk, Level::Action] {
        print!("{:<14}", adv.to_string());
        for lp in levels {
            let ok = GranularitySpec::new(adv, lp).validate().is_ok();
            print!("{:>14}", if ok { "ok" } else { "rejected" });
        }
        println!();
    }

    let (c, m) = (3, 2);
    let adv = [0.5, -1.0, 2.0];
    let per_token = broadcast_advantage(&adv, Level::Action, Level::Token, c, m).unwrap();
    println!("\naction advantages {adv:?}\nper token         {per_token:?}");

    let token_lp = [-0.1, -0.2, -0.3, -0.4, -0.5, -0.6];
    println!(
        "action log-probs  {:?}",
        aggregate_logprob(&token_lp, m, Level::Action)
    );
    println!(
        "chunk log-prob    {:?}",
        aggregate_logprob(&token_lp, m, Level::Chunk)
    );
}
