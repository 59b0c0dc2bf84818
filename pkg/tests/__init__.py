# Tests for MCP Chat Application