"""AOSPR Routing Lab - adaptive shortest-path routing experiments."""
