"""Prompt templates for the three agent roles and the answer judge.

Templates are plain format strings shipped as package constants so runs
and fixtures are byte-stable. Placeholders use ``str.format`` names.
"""

from __future__ import annotations

PROPOSER_SYSTEM = """You are an expert question creator. Your primary task is to reverse-engineer a challenging question from a given answer. The question you create must require a solver to perform 'n' sequential searches to solve it. I will provide you with the target answer and the required number of searches, 'n'.

Your Creation Process & Tools:

1. Analyze Scope and Target: Begin by analyzing the provided 'Answer' (your target) and the required number of searches, 'n' (the path's length). This establishes your final destination and the complexity of the logical chain you need to construct.

2. Build the Question by Working Backwards:

This is the core of the process. You will start from the destination and work your way back to the starting point, step by step.

2.1. The Crucial First Step: Connection and Discovery

Start with the final 'Answer', but do not search for the answer itself directly.

Instead, first analyze the 'Answer'. Brainstorm and identify a closely related yet distinct 'Associated Concept' (e.g., a related historical event, a key figure, a geographic location, a unique attribute, its parent category, etc.).

Perform an exploratory search with the goal of finding the 'bridging information' that connects this 'Associated Concept' to your final 'Answer'.

From your search results, extract a unique, verifiable 'preceding fact'. This is a piece of information that, when searched, would logically lead a user to your final 'Answer'. This 'preceding fact' becomes the answer to Search #n-1.

2.2. Iterate Backwards

Now, treat this newly found 'preceding fact' as your new target.

From this point on, you can search for this new target directly to find the preceding piece of information that leads to it. This becomes the answer to the next search in the backward chain (Search #n-2).

2.3. Construct the Full Chain

Continuously repeat the iterative process from Step 2.2, using each new fact as the target for the next backward search, until you have constructed a complete logical chain of 'n' links.

The very first piece of information you uncover in this process (the one at the start of the chain) will become the initial clue for your question.

3. You must conduct reasoning inside <think> and </think> first every time you get new information. After reasoning, if you find you lack some knowledge, you can call a search engine by <search> query </search>, and it will return the top searched results between <information> and </information>. You can search as many times as you want. If you find no further external knowledge needed, you can directly provide the answer inside <question> and </question> without detailed illustrations. For example, <question> xxx </question>.

Here are three example questions:

Question 1: {example1}

Question 2: {example2}

Question 3: {example3}

Critical Rules:

1. Strictly Fact-Based: You must not create questions based on assumptions. The entire logical path to the solution must be grounded in the information you find through searching.

2. No Spoilers: The question must not contain any direct clues that reveal the answer or the intermediate steps.

3. Search is Mandatory: The question must be impossible to answer from general knowledge alone. It must necessitate the search process you have designed.

4. Adhere to Search Count: The number of searches required to solve the question must precisely match the specified 'search count'.

5. Unique Answer: The designed question must be deterministic, leading to a single, unambiguous final answer. The clues at each step must be precise enough to prevent a solver from reasonably arriving at a different, valid conclusion."""

PROPOSER_USER = """The answer I provided is: {answer}.

You need to create a question that requires {n} searches.

When you have enough information to construct a question, please first check whether the constructed question meets all requirements, especially whether the question is too simple. After checking that all conditions are met, you need to provide the final constructed question in your final response, placing the final question between <question> and </question> tags, for example: <question> ... </question>."""

DEFAULT_EXAMPLE_QUESTIONS = (
    "Who is the grey alien character from American Dad! that was involved in the "
    "Roswell incident in 1947?",
    "What is the name of the 20th-century castle in Devon, England, designed by the "
    "architect who, alongside Gertrude Jekyll, created the famous Edwardian garden at "
    "Hestercombe House, known for its listed orangery?",
    "What was the name of the politician who established a crucial trading store in "
    "the early 20th century, which transformed a small community into an important "
    "trading hub for fur and developed strong relationships with the indigenous "
    "peoples in Alberta?",
)

SOLVER_SYSTEM = "You are a helpful and harmless assistant."

SOLVER_USER = """Answer the given question. You must conduct reasoning inside <think> and </think> first every time you get new information. After reasoning, if you find you lack some knowledge, you can call a search engine by <search> query </search> and it will return the top searched results between <information> and </information>. You can search as many times as your want. If you find no further external knowledge needed, you can directly provide the answer inside <answer> and </answer>, without detailed illustrations. For example, <answer> Beijing </answer>. Question: {question}"""

RAG_SOLVER_USER = """Answer the given question based on the provided materials. You should first conduct very concise reasoning within 50 words, and then directly provide your answer without detailed illustrations after saying 'Answer:'.

Materials: {materials}

Question: {question}"""

JUDGE_USER = """You are a professional judge who evaluates the correctness of answers based on given criteria.

Please determine whether the model's answer is consistent with the reference answer:

Question: {question}

Model Answer: {prediction}

Reference Answer: {ground_truth}

Evaluation Criteria:

1. The model answer must accurately respond to the question and be consistent with the reference answer in meaning.

2. For numerical questions, the values must be equal or very close.

3. For textual questions, the core meaning must be correct.

4. Differences in wording or language are allowed as long as the core answer is the same.

5. If the model answer includes the correct answer and does not contain conflicting information, it is also considered correct.

Please respond only with "Correct" or "Wrong". Do not provide any additional explanation."""

# One document line inside a rendered materials list.
MATERIAL_DOC_TEMPLATE = 'Doc {i} (Title: "{title}") {text}'


def proposer_messages(
    answer: str,
    n_searches: int,
    examples: tuple[str, str, str] = DEFAULT_EXAMPLE_QUESTIONS,
) -> list[dict[str, str]]:
    system = PROPOSER_SYSTEM.format(
        example1=examples[0], example2=examples[1], example3=examples[2]
    )
    user = PROPOSER_USER.format(answer=answer, n=n_searches)
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]


def solver_messages(question: str) -> list[dict[str, str]]:
    return [
        {"role": "system", "content": SOLVER_SYSTEM},
        {"role": "user", "content": SOLVER_USER.format(question=question)},
    ]


def render_materials(docs) -> str:
    """Render documents for the RAG prompt, one numbered line per document."""
    return "\n".join(
        MATERIAL_DOC_TEMPLATE.format(i=i, title=d.title, text=d.text)
        for i, d in enumerate(docs, start=1)
    )


def rag_solver_messages(question: str, materials: str) -> list[dict[str, str]]:
    return [
        {"role": "user", "content": RAG_SOLVER_USER.format(materials=materials, question=question)}
    ]


def judge_messages(question: str, prediction: str, ground_truth: str) -> list[dict[str, str]]:
    return [
        {
            "role": "user",
            "content": JUDGE_USER.format(
                question=question, prediction=prediction, ground_truth=ground_truth
            ),
        }
    ]


def flat_prompt(messages: list[dict[str, str]]) -> str:
    """Single-string view of a message list, used for trajectory records."""
    return "\n\n".join(m["content"] for m in messages)
