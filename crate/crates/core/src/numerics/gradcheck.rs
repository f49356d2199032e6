use super::{NumericsError, ParamId, ParamStore, Tape, Var};

/// A scalar function of a [`ParamStore`] that can be recorded on a tape.
pub trait Objective {
    /// Records the objective on `tape`; `vars[i]` is the leaf of `ParamId(i)`.
    fn record(&self, tape: &mut Tape, params: &ParamStore, vars: &[Var]) -> Result<Var, NumericsError>;

    /// Value of the objective after an entry of `changed` was perturbed.
    ///
    /// The default re-records everything. Implementations may override it to
    /// reuse work that does not depend on `changed`; the branch signature
    /// only has to be consistent between calls with the same `changed`.
    fn evaluate_changed(&self, params: &ParamStore, changed: ParamId) -> Result<Evaluation, NumericsError> {
        let _ = changed;
        evaluate(self, params)
    }
}

/// Objective value plus the branch signature of the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub signature: u64,
}

fn evaluate<O: Objective + ?Sized>(objective: &O, params: &ParamStore) -> Result<Evaluation, NumericsError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = objective.record(&mut tape, params, &vars)?;
    Ok(Evaluation {
        value: tape.scalar_value(out)?,
        signature: tape.branch_signature(),
    })
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed `|ad - fd| / max(1, |ad|, |fd|)`.
    pub tolerance: f64,
    /// Restrict the check to these parameters (all when `None`).
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            only: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub value: f64,
    pub checked: usize,
    /// Entries whose `±step` evaluations took different branches at a kink.
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
    pub failures: Vec<EntryFailure>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares reverse-mode gradients with central finite differences for every
/// entry of the selected parameters.
///
/// Entries whose `+step` and `-step` evaluations take different branches at a
/// piecewise primitive are reported as kinks and excluded. `params` is
/// perturbed in place and restored bit-exactly before returning.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParamStore,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let h = config.step;
    if !(h > 0.0 && h <= 1e-2) {
        return Err(NumericsError::InvalidStep(h));
    }

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = objective.record(&mut tape, params, &vars)?;
    let value = tape.scalar_value(out)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let again = evaluate(objective, params)?;
    if again.value.to_bits() != value.to_bits() {
        return Err(NumericsError::NonDeterministic {
            first: value,
            second: again.value,
        });
    }

    let ids: Vec<ParamId> = match &config.only {
        Some(ids) => ids.clone(),
        None => params.ids().collect(),
    };
    let mut report = GradCheckReport {
        value,
        tolerance: config.tolerance,
        ..Default::default()
    };
    for id in ids {
        let analytic = grads.get_or_zeros(vars[id.0], params.get(id).shape());
        for j in 0..params.get(id).len() {
            let original = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = original + h;
            let plus = objective.evaluate_changed(params, id);
            params.get_mut(id).data_mut()[j] = original - h;
            let minus = objective.evaluate_changed(params, id);
            params.get_mut(id).data_mut()[j] = original;
            let (plus, minus) = (plus?, minus?);

            if plus.signature != minus.signature {
                report.skipped_kinks += 1;
                continue;
            }
            let ad = analytic.data()[j];
            let fd = (plus.value - minus.value) / (2.0 * h);
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.checked += 1;
            report.max_relative_error = report.max_relative_error.max(rel);
            if !(rel <= config.tolerance) {
                report.failures.push(EntryFailure {
                    param: params.name(id).to_string(),
                    index: j,
                    analytic: ad,
                    numeric: fd,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}
