"Cross-Anatomy Domain Adaptation for Segmentation"
