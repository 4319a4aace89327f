"""Workload script execution: JSON-lines commands against an embedded
cluster, with assertions and variable capture.

Each line is {"op": ..., "params": {...}} using the wire-op schema, plus
script-only ops:

* {"op": "ASSERT_READ", "params": {obj, offset_block, nblocks,
   expect: <b64> | expect_crc64: <int>}}
* {"op": "ASSERT_STATS", "params": {path: "tiers.1.bytes_written",
   equals | min | max}}
* {"op": "ASSERT_HA", "params": {<subset of ha status>}}
* {"op": "RUN_UNTIL", "params": {"quiescent": true} | {"time_us": N}}

A command may carry "save": "name"; later params may reference "$name"
(and "$name.id" etc.) so scripts can use generated entity ids.
"""

from __future__ import annotations

import base64
import json

from .bootstrap import SageEnv
from .crc import CRC64
from .errors import AssertionFailed, SageError, ScriptParseError
from .wire import Session, dispatch

SCRIPT_OPS = ("ASSERT_READ", "ASSERT_STATS", "ASSERT_HA", "RUN_UNTIL")


def parse_script(text: str) -> list[dict]:
    cmds = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScriptParseError(line=lineno, reason=str(exc))
        if not isinstance(doc, dict) or "op" not in doc:
            raise ScriptParseError(line=lineno, reason='expected {"op": ...}')
        doc["_line"] = lineno
        cmds.append(doc)
    return cmds


def _substitute(value, vars_: dict):
    if isinstance(value, str) and value.startswith("$"):
        path = value[1:].split(".")
        cur = vars_.get(path[0])
        if cur is None:
            raise ScriptParseError(reason=f"unknown variable {value!r}")
        for part in path[1:]:
            cur = cur[part]
        return cur
    if isinstance(value, dict):
        return {k: _substitute(v, vars_) for k, v in value.items()}
    if isinstance(value, list):
        return [_substitute(v, vars_) for v in value]
    return value


def _stats_path(snapshot: dict, path: str):
    cur = snapshot
    for part in path.split("."):
        if isinstance(cur, dict):
            if part not in cur:
                raise AssertionFailed(reason=f"stats path {path!r} missing at {part!r}")
            cur = cur[part]
        else:
            raise AssertionFailed(reason=f"stats path {path!r} not traversable")
    return cur


class ScriptRunner:
    def __init__(self, env: SageEnv):
        self.env = env
        self.session = Session()
        self.vars: dict[str, object] = {}
        self.failures: list[str] = []

    def run(self, cmds: list[dict]) -> int:
        for cmd in cmds:
            line = cmd.get("_line", 0)
            op = cmd["op"]
            try:
                params = _substitute(cmd.get("params", {}), self.vars)
            except ScriptParseError as exc:
                raise ScriptParseError(line=line, reason=str(exc))
            try:
                if op in SCRIPT_OPS:
                    result = self._script_op(op, params)
                else:
                    result = dispatch(self.env, self.session, op, params)
            except AssertionFailed as exc:
                self.failures.append(f"line {line}: {exc}")
                continue
            except SageError as exc:
                if cmd.get("expect_error") == exc.code:
                    result = {"error": exc.code}
                else:
                    self.failures.append(f"line {line}: {op} failed: {exc.code} {exc}")
                    continue
            if "expect_error" in cmd and "error" not in (result or {}):
                self.failures.append(
                    f"line {line}: expected error {cmd['expect_error']}, got success")
            if "save" in cmd:
                self.vars[cmd["save"]] = result
        return 1 if self.failures else 0

    def _script_op(self, op: str, params: dict) -> dict:
        env = self.env
        if op == "RUN_UNTIL":
            if params.get("quiescent"):
                env.cluster.run_until(quiescent=True)
            elif "time_us" in params:
                env.cluster.run_until(until_time=int(params["time_us"]))
            return {}
        if op == "ASSERT_READ":
            result = dispatch(env, self.session, "READ", params)
            data = base64.b64decode(result["data"])
            if "expect" in params:
                want = base64.b64decode(params["expect"])
                if data != want:
                    raise AssertionFailed(reason="read bytes differ from expectation")
            if "expect_crc64" in params:
                got = CRC64.compute_long(data)
                if got != int(params["expect_crc64"]):
                    raise AssertionFailed(
                        reason=f"crc64 {got:#x} != expected {int(params['expect_crc64']):#x}")
            return {}
        if op == "ASSERT_STATS":
            snapshot = env.cluster.snapshot().to_json()
            value = _stats_path(snapshot, params["path"])
            if "equals" in params and value != params["equals"]:
                raise AssertionFailed(
                    reason=f"stats {params['path']} = {value}, expected {params['equals']}")
            if "min" in params and value < params["min"]:
                raise AssertionFailed(
                    reason=f"stats {params['path']} = {value} < min {params['min']}")
            if "max" in params and value > params["max"]:
                raise AssertionFailed(
                    reason=f"stats {params['path']} = {value} > max {params['max']}")
            return {}
        if op == "ASSERT_HA":
            status = env.ha.status()
            for k, v in params.items():
                if status.get(k) != v:
                    raise AssertionFailed(reason=f"ha {k} = {status.get(k)}, expected {v}")
            return {}
        raise ScriptParseError(reason=f"unknown script op {op}")


def run_script_text(env: SageEnv, text: str):
    """Returns (exit_code, final stats snapshot, failure messages)."""
    runner = ScriptRunner(env)
    code = runner.run(parse_script(text))
    env.cluster.run_until(quiescent=True)
    return code, env.cluster.snapshot(), runner.failures
