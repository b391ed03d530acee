pub mod bounds;
pub mod flow;
pub mod models;
pub mod operator;
pub mod cli;
