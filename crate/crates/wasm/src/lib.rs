//! The simulator in the browser. Every call returns JSON text: `{"ok": ...}`
//! on success, `{"error": {code, message, position?}}` otherwise, the same
//! error body the HTTP API uses.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use iotarch::device::Payload;
use iotarch::scenario::parse_config_str;
use iotarch::sim::{Request, Simulation};

const SCENARIOS: &[(&str, &str)] = &[
    ("smart-home", include_str!("../../../scenarios/smart-home.toml")),
    ("smart-home-onchange", include_str!("../../../scenarios/smart-home-onchange.toml")),
    ("two-region", include_str!("../../../scenarios/two-region.toml")),
];

/// Envelopes kept for the page's feed.
const FEED: usize = 40;

fn ok(v: Value) -> String {
    json!({ "ok": v }).to_string()
}

fn err(code: &str, message: impl ToString) -> String {
    json!({ "error": { "code": code, "message": message.to_string() } }).to_string()
}

#[wasm_bindgen]
pub fn scenarios() -> String {
    ok(json!(SCENARIOS.iter().map(|(n, _)| *n).collect::<Vec<_>>()))
}

#[wasm_bindgen]
pub struct Demo {
    sim: Simulation,
    horizon: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Loads a bundled scenario by name.
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str) -> Result<Demo, String> {
        let text = SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| format!("no scenario {name:?}"))?;
        let scenario = parse_config_str(text).map_err(|e| e.to_string())?;
        let horizon = scenario.horizon;
        Ok(Demo { sim: Simulation::from_scenario(scenario), horizon })
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn ticks(&self) -> u64 {
        self.sim.ticks()
    }

    /// Advances up to `n` ticks, stopping at the horizon.
    pub fn step(&mut self, n: u32) -> String {
        for _ in 0..n {
            if self.sim.ticks() >= self.horizon {
                break;
            }
            self.sim.step();
        }
        self.snapshot()
    }

    pub fn snapshot(&self) -> String {
        ok(serde_json::to_value(self.sim.snapshot()).expect("serializable"))
    }

    /// The latest published envelopes, newest first.
    pub fn feed(&self) -> String {
        let items: Vec<Value> = self
            .sim
            .log()
            .iter()
            .rev()
            .filter(|e| e.kind == "pub")
            .take(FEED)
            .map(|e| json!({ "tick": e.tick, "topic": e.body["topic"], "schema": e.body["schema"], "body": e.body["body"] }))
            .collect();
        ok(json!(items))
    }

    pub fn submit_rule(&mut self, text: &str) -> String {
        match self.sim.apply(Request::SubmitRule { text: text.to_string() }) {
            Ok(v) => ok(v),
            Err(e) => json!({ "error": e.body() }).to_string(),
        }
    }

    /// Sends a command for the first registered user. `value` is JSON:
    /// `true`, `21.5` or `"text"`.
    pub fn issue_command(&mut self, device: u32, resource: u16, value: &str) -> String {
        let value: Payload = match serde_json::from_str(value) {
            Ok(v) => v,
            Err(e) => return err("BadRequest", e),
        };
        let Some(user) = self.sim.snapshot().users.first().map(|u| u.id) else {
            return err("UnknownUser", "the scenario has no users");
        };
        match self.sim.apply(Request::IssueCommand { user, device, resource, value }) {
            Ok(v) => ok(v),
            Err(e) => json!({ "error": e.body() }).to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn bundled_scenarios_load() {
        for (name, _) in SCENARIOS {
            let mut d = Demo::new(name).unwrap();
            let snap = parse(&d.step(3));
            assert_eq!(snap["ok"]["tick"], 3, "{name}");
        }
        assert!(Demo::new("nope").is_err());
    }

    #[test]
    fn stops_at_horizon() {
        let mut d = Demo::new("smart-home").unwrap();
        d.step(500);
        assert_eq!(d.ticks(), d.horizon());
    }

    #[test]
    fn rule_errors_carry_position() {
        let mut d = Demo::new("smart-home").unwrap();
        d.step(1);
        let r = parse(&d.submit_rule("WHEN room.temp >> 1 THEN ESCALATE(\"x\")"));
        assert_eq!(r["error"]["position"], json!({ "line": 1, "col": 17 }));
        let r = parse(&d.submit_rule("WHEN room.temp > 1 THEN ESCALATE(\"x\")"));
        assert_eq!(r["ok"]["id"], "rule-004");
    }

    #[test]
    fn command_is_acked() {
        let mut d = Demo::new("smart-home").unwrap();
        d.step(2);
        let c = parse(&d.issue_command(2, 1, "true"));
        let id = c["ok"]["id"].as_str().unwrap().to_string();
        let snap = parse(&d.step(5));
        let cmd = snap["ok"]["commands"].as_array().unwrap().iter().find(|c| c["id"] == id.as_str()).unwrap().clone();
        assert_eq!(cmd["outcome"]["state"], "acked");
        assert_eq!(parse(&d.issue_command(2, 1, "nonsense"))["error"]["code"], "BadRequest");
        assert!(!parse(&d.feed())["ok"].as_array().unwrap().is_empty());
    }
}
