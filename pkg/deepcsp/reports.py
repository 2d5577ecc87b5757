import json
import math
import os
from dataclasses import asdict
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence


def _derive_status(issues: List[Dict[str, str]]) -> str:
    if any(issue.get("severity") == "error" for issue in issues):
        return "Error"
    if any(issue.get("severity") == "warning" for issue in issues):
        return "Warning"
    return "OK"


def _clean(value):
    # JSON has no NaN; empty classes report null accuracy
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_clean(item) for item in value]
    if isinstance(value, dict):
        return {key: _clean(item) for key, item in value.items()}
    return value


def metrics_record(metrics) -> Dict[str, object]:
    return _clean(asdict(metrics))


def build_summary(command: str, data: Dict[str, object],
                  issue_groups: Sequence[Optional[List[Dict[str, str]]]] = ()) -> Dict[str, object]:
    issues: List[Dict[str, str]] = []
    for group in issue_groups:
        issues.extend(group or [])

    return {
        "command": command,
        "status": _derive_status(issues),
        "finished_at": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
        **_clean(dict(data)),
        "issues": issues,
    }


def write_json(path: str, doc: Dict[str, object]):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as handle:
        json.dump(_clean(doc), handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(tmp_path, path)


def append_jsonl(path: str, record: Dict[str, object]):
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(_clean(record), sort_keys=True) + "\n")
