"""ECG to ICD-10 discharge-diagnosis pipeline: label engineering, signal
preprocessing, cohort linking, classifiers, training and bootstrap evaluation."""

__version__ = "0.1.0"
