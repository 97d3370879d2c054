# Page-level multi-vector retrieval with LLM filtering and iterative answering
