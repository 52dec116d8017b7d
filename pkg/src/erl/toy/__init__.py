"""Desk-scale PPO trainer over a synthetic multi-hop world."""
