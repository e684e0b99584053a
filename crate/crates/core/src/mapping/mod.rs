//! Translation of an instance's operations onto transactions.

pub mod dag;
pub mod plan;

pub use dag::{count_interleavings, flatten, EdgeKind, ExecutionRecord, MappingError, OpKind, OpNode, OperationDAG, RecordEntry};
pub use plan::{execute, flat_plan, strategy_select, to_nested, MappingPlan, PlanItem, RegionTree, Strategy};
