//! Least-squares adversarial losses and the L1 cycle loss.

use serde::{Deserialize, Serialize};

use super::{Direction, Domain, GanModel, Translator};
use crate::error::Result;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub gan: f32,
    #[serde(default = "ten")]
    pub cycle: f32,
}

fn one() -> f32 {
    1.0
}

fn ten() -> f32 {
    10.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gan: 1.0, cycle: 10.0 }
    }
}

/// Mean absolute difference.
pub fn mae(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

fn mean_sq_to(g: &mut Graph<'_>, scores: Var, target: f32) -> Result<Var> {
    let d = g.add_scalar(scores, -target)?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Discriminator loss over both domains: the four squared-error terms
/// (real toward 1, fake toward 0) averaged.
pub fn lsgan_disc_loss(g: &mut Graph<'_>, real: [Var; 2], fake: [Var; 2]) -> Result<Var> {
    let mut total = mean_sq_to(g, real[0], 1.0)?;
    for (v, target) in [(fake[0], 0.0), (real[1], 1.0), (fake[1], 0.0)] {
        let term = mean_sq_to(g, v, target)?;
        total = g.add(total, term)?;
    }
    g.scale(total, 0.25)
}

/// Generator loss: fakes of both domains pushed toward 1, averaged.
pub fn lsgan_gen_loss(g: &mut Graph<'_>, fake: [Var; 2]) -> Result<Var> {
    let a = mean_sq_to(g, fake[0], 1.0)?;
    let b = mean_sq_to(g, fake[1], 1.0)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

/// `|G_BA(G_AB(a)) - a|_1 + |G_AB(G_BA(b)) - b|_1`, each term a mean.
pub fn cycle_loss<'p, T: Translator + ?Sized>(
    net: &'p T,
    g: &mut Graph<'p>,
    real_a: Var,
    real_b: Var,
) -> Result<Var> {
    let fake_b = net.forward(g, Direction::AB, real_a)?;
    let rec_a = net.forward(g, Direction::BA, fake_b)?;
    let fake_a = net.forward(g, Direction::BA, real_b)?;
    let rec_b = net.forward(g, Direction::AB, fake_a)?;
    let la = mae(g, rec_a, real_a)?;
    let lb = mae(g, rec_b, real_b)?;
    g.add(la, lb)
}

/// Score all four images and return `(disc_loss, gen_loss)`.
///
/// `fake_a` is a translation into domain A (from a B image) and `fake_b`
/// the other way round.
pub fn gan_losses<'p>(
    model: &'p GanModel,
    g: &mut Graph<'p>,
    real_a: Var,
    real_b: Var,
    fake_a: Var,
    fake_b: Var,
) -> Result<(Var, Var)> {
    let ra = model.discriminate_var(g, Domain::A, real_a)?;
    let rb = model.discriminate_var(g, Domain::B, real_b)?;
    let fa = model.discriminate_var(g, Domain::A, fake_a)?;
    let fb = model.discriminate_var(g, Domain::B, fake_b)?;
    let d = lsgan_disc_loss(g, [ra, rb], [fa, fb])?;
    let gl = lsgan_gen_loss(g, [fa, fb])?;
    Ok((d, gl))
}
