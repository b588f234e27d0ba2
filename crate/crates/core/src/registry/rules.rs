use super::AlarmRule;
use crate::mqtt::TopicName;
use crate::normalizer::{serialize_record, SensorRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alert {
    pub rule_id: String,
    pub topic: TopicName,
    /// The triggering record, canonically serialized.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleOutcome {
    pub alerts: Vec<Alert>,
    /// Matching armed rules skipped because the value is not a decimal.
    pub skipped_non_numeric: usize,
}

/// Strict decimal: optional sign, digits with an optional fraction, or a bare
/// fraction. No exponent, no whitespace, no inf/nan.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match digits.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (digits, None),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    let ok = all_digits(int)
        && frac.is_none_or(all_digits)
        && (!int.is_empty() || frac.is_some_and(|f| !f.is_empty()));
    if !ok {
        return None;
    }
    s.parse().ok()
}

fn selects(selector: &str, value: &str) -> bool {
    selector == "*" || selector == value
}

/// Evaluates rules in the given order against one record.
pub fn evaluate_rules<'a>(rules: impl IntoIterator<Item = &'a AlarmRule>, rec: &SensorRecord) -> RuleOutcome {
    let mut out = RuleOutcome::default();
    let mut value = None;
    let mut payload = None;
    for rule in rules {
        if !rule.armed || !selects(&rule.node_selector, &rec.node_id) || !selects(&rule.sensor_selector, &rec.sensor_id) {
            continue;
        }
        let Some(v) = *value.get_or_insert_with(|| parse_decimal(&rec.value)) else {
            out.skipped_non_numeric += 1;
            continue;
        };
        if !rule.comparator.holds(v, rule.threshold) {
            continue;
        }
        let Ok(topic) = TopicName::new(rule.action_topic.as_str()) else {
            log::warn!("rule {} has an unusable action topic", rule.rule_id);
            continue;
        };
        out.alerts.push(Alert {
            rule_id: rule.rule_id.clone(),
            topic,
            payload: payload.get_or_insert_with(|| serialize_record(rec)).clone(),
        });
    }
    out
}
