//! GAE with a truncation, group-relative advantages and the success filter.

use chunkrl::advantage::{
    compute_gae, grpo_group_advantage, success_rate_filter, FilterBounds, GaeParams, GroupBatch,
    UnitEnd,
};

fn main() {
    let rewards = [0.0, 0.0, 1.0, 0.0, 0.0];
    let values = [0.2, 0.4, 0.8, 0.1, 0.3];
    let ends = [
        UnitEnd::Continue,
        UnitEnd::Continue,
        UnitEnd::Terminated,
        UnitEnd::Continue,
        UnitEnd::Truncated(0.5),
    ];
    let (adv, ret) = compute_gae(&rewards, &values, &ends, 0.0, GaeParams::default()).unwrap();
    println!("advantages {adv:.4?}\nreturns    {ret:.4?}\n");

    let groups = vec![
        GroupBatch::from_returns(vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
        GroupBatch::from_returns(vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        GroupBatch::from_returns(vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
    ];
    let kept = success_rate_filter(groups, FilterBounds::default());
    println!("groups kept by the (0, 1) filter: {}", kept.len());
    for g in &kept {
        println!(
            "returns {:?} -> advantages {:.4?}",
            g.returns,
            grpo_group_advantage(g, 0.0).unwrap()
        );
    }
}
