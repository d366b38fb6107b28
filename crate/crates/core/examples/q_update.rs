//! The Q-learning update on a hand-sized example, and the epsilon schedule.

use blockqnn::agent::{
    shaped_reward, update_from_trajectory, ActionSpace, EpsilonSchedule, QTable, Shaping, State, Trajectory,
};
use blockqnn::nsc::{NscCode, OpType};

fn main() {
    let space = ActionSpace::block();
    let c1 = NscCode::new(1, OpType::Convolution, 3, 0, 0);
    let c2 = NscCode::new(2, OpType::Convolution, 3, 1, 0);
    let t = NscCode::terminal(3);
    let traj = Trajectory::new(vec![c1, c2, t], &space).unwrap();

    // alpha 0.01, gamma 1, reward 0.6 over three steps
    let mut q = QTable::new(0.01, 1.0).unwrap();
    update_from_trajectory(&mut q, &traj, 0.6, &space, Shaping::Shaped).unwrap();
    println!("shaped step reward r/T = {}", shaped_reward(0.6, 3));
    println!("Q(c2, terminal) = {:.5}", q.get(&State::Layer(c2), &t));
    println!("Q(c1, c2)       = {:.5}", q.get(&State::Layer(c1), &c2));
    println!("Q(start, c1)    = {:.7}", q.get(&State::Start, &c1));

    let mut flat = QTable::new(0.01, 1.0).unwrap();
    update_from_trajectory(&mut flat, &traj, 0.6, &space, Shaping::Unshaped).unwrap();
    println!("without shaping Q(c1, c2) = {:.5}", flat.get(&State::Layer(c1), &c2));

    for (name, s) in [("block", EpsilonSchedule::block_search()), ("connection", EpsilonSchedule::connection_search())] {
        let stages: Vec<String> = s.stages.iter().map(|(e, n)| format!("{e}x{n}")).collect();
        println!("{name} schedule ({} iterations): {}", s.total_iterations(), stages.join(" "));
    }
}
