"""Differentially private traffic shaping for slotted IoT packet streams."""
