"""Few-shot segmentation with a feature-space DoG pyramid and bidirectional ConvLSTM fusion."""

__version__ = "0.1.0"
