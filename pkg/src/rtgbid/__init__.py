"""Return-to-go guided decision transformers for budget-constrained auto-bidding."""

__version__ = "0.1.0"
