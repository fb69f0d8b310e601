//! The four decoder building blocks. Each block is a set of stored
//! parameters plus a forward function over graph variables, so every
//! output is differentiable with respect to inputs and parameters alike.

mod fia;
mod gcf;
mod ha;
mod sr;

pub use fia::{fia_forward, fia_trace, FiaParams, FiaTrace};
pub use gcf::{gcf_forward, GcfParams, GcfStage};
pub use ha::{ha_forward, ha_trace, HaParams, HaTrace};
pub use sr::{sr_forward, SrParams};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::Ctx;

/// Hidden width of a squeeze/excite style bottleneck.
pub(crate) fn reduced(width: usize, ratio: usize) -> usize {
    (width / ratio.max(1)).max(1)
}

pub(crate) fn expect_channels(cx: &Ctx, v: Var, name: &str, channels: usize) -> Result<[usize; 4]> {
    let d = cx.graph().dims4(v)?;
    if d[1] != channels {
        return Err(Error::shape(
            name,
            format!("[{}, {channels}, {}, {}]", d[0], d[2], d[3]),
            &d,
        ));
    }
    Ok(d)
}
