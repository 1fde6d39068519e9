"""30-day readmission risk modelling: cohort features, LACE baseline, numpy LSTM, evaluation and attributions."""

__version__ = "0.1.0"
