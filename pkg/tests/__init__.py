"""
swarm-markers Test Suite

Run with: pytest tests/ -v
Coverage: pytest --cov=. tests/
Acceptance runs: pytest -m slow tests/
"""
