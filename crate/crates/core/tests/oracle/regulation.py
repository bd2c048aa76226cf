"""Hand simulation of the regulation scenario: thermal model plus tick pipeline.

Pipeline, counted per hop for a sample taken at tick t:
  t      sensor reads the value left by the previous tick's step
  t+1    frame reaches the gateway, telemetry published
  t+2    loop Monitor evaluates rules, symptom published
  t+3    Analyse, t+4 Plan, t+5 Execute publishes the command
  t+6    gateway downlink, t+7 device applies it (after that tick's step)
so a command decided from sample t changes the rate used from step t+8 on.

Writes ../data/regulation_oracle.json. Only the standard library is used.
"""

import json
import os

TICKS = 200
START, DRIFT, RATE = 28.0, 0.1, -0.5
ON_ABOVE, OFF_BELOW, MEAN_N = 23.0, 21.0, 3


def simulate(on_change=None):
    temp = START
    ac = False
    applies = {}  # tick -> list of commanded states, in plan order
    series = []
    last_reported = None
    temps, toggles, telemetry = [], [], 0
    arrivals = {}  # monitor tick -> sample value
    for t in range(TICKS):
        # sensing reads the state at the start of the tick
        if on_change is None or last_reported is None or abs(temp - last_reported) >= on_change:
            last_reported = temp
            if t + 1 < TICKS:
                telemetry += 1
            arrivals[t + 2] = temp
        # environment step with the actuator state held at tick start
        temp += DRIFT + (0.0 + RATE * (1.0 if ac else 0.0)) + 0.0
        temps.append(temp)
        # monitor: push the sample, evaluate both rules
        if t in arrivals:
            series.append(arrivals.pop(t))
            recent = series[-MEAN_N:]
            mean = sum(recent) / len(recent)
            cmds = []
            if mean > ON_ABOVE:
                cmds.append(True)
            if series[-1] < OFF_BELOW:
                cmds.append(False)
            if cmds:
                applies.setdefault(t + 5, []).extend(cmds)
        # device applies commands after the step of its tick
        for state in applies.pop(t, []):
            if state != ac:
                toggles.append([t, state])
            ac = state
    return {"temps": temps, "toggles": toggles, "telemetry": telemetry}


if __name__ == "__main__":
    out = {"periodic": simulate(), "on_change": simulate(0.3)}
    here = os.path.dirname(os.path.abspath(__file__))
    with open(os.path.join(here, "..", "data", "regulation_oracle.json"), "w") as f:
        json.dump(out, f)
        f.write("\n")
    for k, v in out.items():
        tail = v["temps"][40:]
        print(k, "toggles", v["toggles"], "telemetry", v["telemetry"], "band", min(tail), max(tail))
