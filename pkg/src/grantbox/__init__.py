"""Evaluation sandbox for privilege misuse of tool-calling LLM agents.

Deploys (mock or real) MCP tool servers in an isolated runtime, bridges their
stdio transport to HTTP/SSE, runs agents against generated requests under
prompt-injection attack, and aggregates attack-success-rate reports with full
tool-call and network traceability.
"""

__version__ = "0.1.0"
