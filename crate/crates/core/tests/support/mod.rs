#![allow(dead_code)]

pub mod follower;
pub mod gradcheck;
pub mod oracles;
pub mod reward_table;
