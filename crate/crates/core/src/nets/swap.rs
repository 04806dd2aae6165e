use candle_core::Tensor;

use super::{LatentCode, Mode, ModelBundle};
use crate::error::{Error, Result};

/// Result of encoding a live batch A and a spoof batch B and decoding all
/// four content/liveness pairings.
#[derive(Debug, Clone)]
pub struct Swap {
    pub code_a: LatentCode,
    pub code_b: LatentCode,
    /// `[A′; B′; A_b; B_a]` stacked along the batch axis, each block `n` rows.
    pub generated: Tensor,
    pub n: usize,
}

impl Swap {
    fn block(&self, i: usize) -> Result<Tensor> {
        Ok(self.generated.narrow(0, i * self.n, self.n)?)
    }

    /// Dec(C_A, L_A)
    pub fn rec_a(&self) -> Result<Tensor> {
        self.block(0)
    }

    /// Dec(C_B, L_B)
    pub fn rec_b(&self) -> Result<Tensor> {
        self.block(1)
    }

    /// Dec(C_A, L_B): A's content rendered with spoof liveness.
    pub fn a_b(&self) -> Result<Tensor> {
        self.block(2)
    }

    /// Dec(C_B, L_A): B's content rendered with live liveness.
    pub fn b_a(&self) -> Result<Tensor> {
        self.block(3)
    }

    /// `[A′; B′]`
    pub fn reconstructions(&self) -> Result<Tensor> {
        Ok(self.generated.narrow(0, 0, 2 * self.n)?)
    }

    /// `[A_b; B_a]`
    pub fn translations(&self) -> Result<Tensor> {
        Ok(self.generated.narrow(0, 2 * self.n, 2 * self.n)?)
    }
}

impl ModelBundle {
    /// Encodes `[A; B]` in one pass and decodes `(C_A,L_A)`, `(C_B,L_B)`,
    /// `(C_A,L_B)`, `(C_B,L_A)` in one pass. Each decode uses the shortcuts of
    /// the image providing the content.
    pub fn swap(&self, live: &Tensor, spoof: &Tensor, mode: Mode) -> Result<Swap> {
        let n = live.dim(0)?;
        if spoof.dim(0)? != n || n == 0 {
            return Err(Error::Shape(format!(
                "swap needs equal non-empty batches, got {} and {}",
                n,
                spoof.dim(0)?
            )));
        }
        let code = self.encode(&Tensor::cat(&[live, spoof], 0)?, mode)?;
        let code_a = code.narrow(0, n)?;
        let code_b = code.narrow(n, n)?;
        let pick = |f: fn(&LatentCode) -> &Tensor, order: [&LatentCode; 4]| -> Result<Tensor> {
            let parts: Vec<&Tensor> = order.iter().map(|c| f(c)).collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        let content_order = [&code_a, &code_b, &code_a, &code_b];
        let liveness_order = [&code_a, &code_b, &code_b, &code_a];
        let content = pick(|c| &c.content, content_order)?;
        let liveness = pick(|c| &c.liveness, liveness_order)?;
        let shortcuts = [
            pick(|c| &c.shortcuts[0], content_order)?,
            pick(|c| &c.shortcuts[1], content_order)?,
        ];
        let generated = self.decode(&content, &liveness, &shortcuts, mode)?;
        Ok(Swap {
            code_a,
            code_b,
            generated,
            n,
        })
    }
}
