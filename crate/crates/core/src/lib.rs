pub mod authority;
pub mod forest;
pub mod hash_tree;
pub mod node;
pub mod par;
pub mod repair;
pub mod sim;
pub mod wire;
