use crate::cohort::SurvivalOutcome;

/// Negative Cox partial likelihood over one batch, averaged over its events,
/// with Breslow handling of tied times:
///
/// `-(1/E) * sum_{events i} [s_i - log sum_{t_j >= t_i} exp(s_j)]`
///
/// Returns the value and its gradient with respect to the scores, or `None`
/// when the batch holds no events.
pub fn cox_batch_loss(scores: &[f64], y: &[SurvivalOutcome]) -> Option<(f64, Vec<f64>)> {
    assert_eq!(scores.len(), y.len(), "one score per subject");
    let n_events = y.iter().filter(|o| o.event).count();
    if n_events == 0 {
        return None;
    }
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();

    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].duration.total_cmp(&y[b].duration));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = y[order[start]].duration;
        let len = order[start..].iter().take_while(|&&i| y[i].duration == t).count();
        groups.push((start, start + len));
        start += len;
    }

    // risk-set denominators, latest group first
    let mut denom = vec![0.0; groups.len()];
    let mut acc = 0.0;
    for (g, &(a, b)) in groups.iter().enumerate().rev() {
        acc += order[a..b].iter().map(|&i| w[i]).sum::<f64>();
        denom[g] = acc;
    }

    let scale = 1.0 / n_events as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; y.len()];
    // running sum over event groups up to the current time of events / denominator
    let mut inv_acc = 0.0;
    for (g, &(a, b)) in groups.iter().enumerate() {
        let events = order[a..b].iter().filter(|&&i| y[i].event).count();
        if events > 0 {
            let log_denom = denom[g].ln() + shift;
            for &i in &order[a..b] {
                if y[i].event {
                    value -= scores[i] - log_denom;
                }
            }
            inv_acc += events as f64 / denom[g];
        }
        for &i in &order[a..b] {
            let observed = if y[i].event { 1.0 } else { 0.0 };
            grad[i] = -scale * (observed - w[i] * inv_acc);
        }
    }
    Some((value * scale, grad))
}
