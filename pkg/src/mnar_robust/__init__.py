"""Robust binary classification under MNAR sample selection bias."""
