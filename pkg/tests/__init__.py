"""DeVLBert Tests Package."""
