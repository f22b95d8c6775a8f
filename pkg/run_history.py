#!/usr/bin/env python3
"""
Run History
Step-by-step record of a pipeline run, saved as run_history.json next to its artifacts.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Union


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


class RunHistory:
    """Builds the run history from pipeline steps."""

    def __init__(self, command: str):
        self.command = command
        self.steps: List[Dict[str, Any]] = []

    def add_step(self, step_name: str, inputs: Dict[str, Any], outputs: Dict[str, Any], note: str = ""):
        self.steps.append({
            'timestamp': datetime.now().isoformat(),
            'step': step_name,
            'inputs': _plain(inputs),
            'outputs': _plain(outputs),
            'note': note,
        })

    def add_extraction(self, images: int, features: int, failed: List[str], dim: int):
        self.add_step(
            step_name="Feature Extraction",
            inputs={'images': images},
            outputs={'features': features, 'dim': dim, 'failed_images': failed},
            note="Failed images are skipped; the rest of the batch is kept",
        )

    def add_search(self, queries: int, k: Any, prune_by_category: bool, threads: int):
        self.add_step(
            step_name="Search",
            inputs={'queries': queries, 'k': k, 'prune_by_category': prune_by_category, 'threads': threads},
            outputs={},
        )

    def add_evaluation(self, mean_ap: Dict[str, float]):
        self.add_step(step_name="Evaluation", inputs={}, outputs={'mean_ap': mean_ap})

    def to_dict(self) -> Dict[str, Any]:
        return {'command': self.command, 'steps': self.steps}

    def save(self, output_dir: Union[str, Path]) -> Path:
        path = Path(output_dir) / 'run_history.json'
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path
