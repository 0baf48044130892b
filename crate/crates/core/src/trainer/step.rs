use bitstain_tensor::{Tape, Tensor};

use super::state::TrainState;
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, identity_loss, lsgan_d_loss, lsgan_g_loss, ChannelSubset, CyclePasses, Fusion,
    LossReport, Net,
};
use crate::style::{batch_mean_token, fusion_weight, FusionSchedule};

impl TrainState {
    pub fn schedule(&self) -> FusionSchedule {
        FusionSchedule {
            w0: self.config.fusion.w0,
            w_min: self.config.fusion.w_min,
            total_steps: self.total_steps.max(1),
        }
    }

    /// Fusion weight at the current step.
    pub fn fusion_weight(&self) -> Result<f64> {
        let sched = self.schedule();
        fusion_weight(self.step.min(sched.total_steps), &sched)
    }
}

fn check_batch(state: &TrainState, name: &str, t: &Tensor) -> Result<()> {
    state.g_b2h.check_input(t.shape()).map_err(|e| Error::Shape(format!("{name} batch: {e}")))
}

/// One optimization step on a BIT batch `x` and an H&E batch `y`, both
/// `[B, 3, S, S]` in `[-1, 1]`.
///
/// Order: encode `y` with `G_h2b` and fold its mean style token into the
/// prototype; translate both ways (BIT side decoded with the fused token);
/// evaluate every loss; update both generators; then update both
/// discriminators against the pre-update translations.
pub fn train_step(state: &mut TrainState, x: &Tensor, y: &Tensor, subset: &ChannelSubset) -> Result<LossReport> {
    check_batch(state, "BIT", x)?;
    check_batch(state, "H&E", y)?;
    let w = state.fusion_weight()?;
    let weights = state.config.weights();

    let tape = Tape::new();
    let pb = state.g_b2h.params().bind(&tape, true);
    let ph = state.g_h2b.params().bind(&tape, true);
    let pd_he = state.d_he.params().bind(&tape, false);
    let pd_bit = state.d_bit.params().bind(&tape, false);
    let b2h = Net {
        gen: &state.g_b2h,
        params: &pb,
    };
    let h2b = Net {
        gen: &state.g_h2b,
        params: &ph,
    };
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());

    let enc_he = h2b.encode(yv);
    state
        .prototype
        .update(&batch_mean_token(&enc_he.style.value()))?;
    let proto = state.prototype.clone();
    let fusion = Fusion::Prototype(&proto, w);

    let passes = CyclePasses::run(b2h, h2b, xv, enc_he, fusion)?;
    let enc_idt_he = b2h.encode(yv);
    let idt_he = b2h.decode(&enc_idt_he, fusion.apply(enc_idt_he.style)?);
    let (idt_bit, _) = state.g_h2b.forward_var(&ph, xv);

    let cycle_bit = cycle_loss(xv, passes.rec_bit);
    let cycle_he = cycle_loss(yv, passes.rec_he);
    let identity_bit = identity_loss(xv, idt_bit);
    let identity_he = identity_loss(yv, idt_he);
    let (msc_bit, msc_he) = passes.msc(subset)?;
    let style = passes.style_loss()?;
    let adv_b2h = lsgan_g_loss(state.d_he.forward_var(&pd_he, passes.fake_he));
    let adv_h2b = lsgan_g_loss(state.d_bit.forward_var(&pd_bit, passes.fake_bit));

    let msc_total = msc_bit + msc_he;
    let total = (cycle_bit + cycle_he).scale(weights.lambda_cycle)
        + (identity_bit + identity_he).scale(weights.lambda_idt)
        + msc_total.scale(weights.lambda_msc)
        + style.scale(weights.lambda_style)
        + (adv_b2h + adv_h2b);

    let v = |t: bitstain_tensor::Var<'_>| t.value().item();
    let mut report = LossReport {
        step: state.step,
        adversarial_b2h: v(adv_b2h),
        adversarial_h2b: v(adv_h2b),
        cycle_bit: v(cycle_bit),
        cycle_he: v(cycle_he),
        identity_bit: v(identity_bit),
        identity_he: v(identity_he),
        msc_bit: v(msc_bit),
        msc_he: v(msc_he),
        msc_total: v(msc_total),
        style: v(style),
        total: v(total),
        disc_he: 0.0,
        disc_bit: 0.0,
    };
    report.check_finite()?;

    let grads = tape.backward(total);
    let gb = pb.grads(&grads);
    let gh = ph.grads(&grads);
    let fake_he = passes.fake_he.value();
    let fake_bit = passes.fake_bit.value();
    drop(grads);
    state.opt_g_b2h.step(state.g_b2h.params_mut(), &gb);
    state.opt_g_h2b.step(state.g_h2b.params_mut(), &gh);

    let dtape = Tape::new();
    let pd_he = state.d_he.params().bind(&dtape, true);
    let pd_bit = state.d_bit.params().bind(&dtape, true);
    let d_he = lsgan_d_loss(
        state.d_he.forward_var(&pd_he, dtape.constant(y.clone())),
        state.d_he.forward_var(&pd_he, dtape.leaf(fake_he, false)),
    );
    let d_bit = lsgan_d_loss(
        state.d_bit.forward_var(&pd_bit, dtape.constant(x.clone())),
        state.d_bit.forward_var(&pd_bit, dtape.leaf(fake_bit, false)),
    );
    report.disc_he = d_he.value().item();
    report.disc_bit = d_bit.value().item();
    report.check_finite()?;
    let dgrads = dtape.backward(d_he + d_bit);
    let g_dhe = pd_he.grads(&dgrads);
    let g_dbit = pd_bit.grads(&dgrads);
    state.opt_d_he.step(state.d_he.params_mut(), &g_dhe);
    state.opt_d_bit.step(state.d_bit.params_mut(), &g_dbit);

    state.step += 1;
    Ok(report)
}
