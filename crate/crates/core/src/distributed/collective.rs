use crate::error::Result;

/// Synchronization points of data-parallel training.
pub trait Collective {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;

    /// Replaces `grads` with the mean over ranks, summed in ascending rank
    /// order.
    fn allreduce_mean(&mut self, grads: &mut [f32]) -> Result<()>;

    /// Replaces `values` with their mean over ranks. Used for small
    /// statistics such as advantage moments and KL estimates.
    fn average(&mut self, values: &mut [f32]) -> Result<()>;

    /// Overwrites `params` on every rank with rank 0's values.
    fn broadcast(&mut self, _params: &mut [f32]) -> Result<()> {
        Ok(())
    }

    /// Fails unless every rank holds bitwise identical `params`.
    fn verify(&mut self, _params: &[f32]) -> Result<()> {
        Ok(())
    }

    /// Ends the session. Rank 0 notifies every worker.
    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Single-process collective: every operation is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Local;

impl Collective for Local {
    fn rank(&self) -> usize {
        0
    }

    fn world_size(&self) -> usize {
        1
    }

    fn allreduce_mean(&mut self, _grads: &mut [f32]) -> Result<()> {
        Ok(())
    }

    fn average(&mut self, _values: &mut [f32]) -> Result<()> {
        Ok(())
    }
}
