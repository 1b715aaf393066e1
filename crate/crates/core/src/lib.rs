pub mod density;
pub mod error;
pub mod fiber;
pub mod linsys;
pub mod lqcost;
pub mod numerics;
pub mod oracle;
pub mod transport;

pub use error::{Error, Result};
