"""Active learning loop."""

from .loop import ALState, LearningCurve, initial_state, labels_to_reach, oracle_label, query, run_loop

__all__ = ["ALState", "LearningCurve", "initial_state", "labels_to_reach", "oracle_label", "query", "run_loop"]
