pub mod object_store;
pub mod trace;
pub mod txn_engine;
pub mod ca_action;
pub mod mapping;
pub mod audit;
pub mod sim;
pub mod report;
