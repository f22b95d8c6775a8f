#!/usr/bin/env python3
"""
Search Errors - Exception hierarchy shared by every stage of the instance-search pipeline
Each error carries a context dict so the CLI can emit machine-readable failure JSON
"""

from typing import Any, Dict, Optional


class InstanceSearchError(Exception):
    """Base class for all pipeline errors."""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = dict(context or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': self.message,
            'context': {key: str(value) for key, value in self.context.items()},
        }


class ShapeMismatchError(InstanceSearchError, ValueError):
    """Tensor, weight or vector shapes do not line up."""


class NonFiniteError(InstanceSearchError, ValueError):
    """NaN or Inf found where finite values are required."""


class EmptyROIError(InstanceSearchError, ValueError):
    """ROI lies entirely outside its feature map."""


class FormatError(InstanceSearchError):
    """A binary or JSON artifact could not be parsed."""


class IndexBuildError(InstanceSearchError, ValueError):
    """A feature record cannot enter the search index."""


class EvaluationError(InstanceSearchError, ValueError):
    """Metric inputs violate their preconditions."""


class ManifestError(InstanceSearchError):
    """Benchmark construction failed."""


class ConfigError(InstanceSearchError):
    """Run configuration is invalid or points at missing paths."""


class InsufficientResourcesError(InstanceSearchError):
    """Not enough memory or disk for the requested run."""
