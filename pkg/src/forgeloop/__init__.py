"""forgeloop: an agentic loop that builds bespoke LLM serving systems.

An outer planning loop (issue-tracker, evolutionary, or Ralph policy) plans
over validated git checkpoints and dispatches one task per round to an inner
Implementer -> Accuracy Judge -> Performance Evaluator pipeline. All agent
intelligence comes from pluggable external harness processes; a deterministic
scripted stub covers offline testing.

Keep this module import-light: the scripted stub re-imports the package in a
subprocess on every agent invocation.
"""

__version__ = "0.1.0"
