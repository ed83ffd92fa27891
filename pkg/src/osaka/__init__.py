"""OSAKA continual-learning benchmark: stream, learners and evaluation."""
