// Thin typed client over the captioning service. The UI performs no other
// network access and runs no model code of its own.

export interface ExampleSummary {
  image_id: string;
  concepts: string[];
  clean: string;
  noisy: string;
}

export interface Prediction {
  image_id: string;
  baseline_caption: string[] | null;
  skeleton: string[];
  skeleton_caption: string[];
  log_probs: number[];
}

export interface Regenerated {
  image_id: string;
  caption: string[];
  skeleton: string[];
  log_probs: number[];
}

export interface FieldError {
  field: string;
  message: string;
}

/** Network-level failure: server unreachable or non-JSON response. */
export class ServiceDown extends Error {
  constructor(cause: unknown) {
    super(`captioning service unreachable: ${cause}`);
    this.name = "ServiceDown";
  }
}

/** The service understood the request and said no (400/404). */
export class RequestRejected extends Error {
  readonly errors: FieldError[];

  constructor(status: number, errors: FieldError[]) {
    super(`request rejected (${status}): ${errors.map((e) => `${e.field}: ${e.message}`).join("; ")}`);
    this.name = "RequestRejected";
    this.errors = errors;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(base = "", fetchFn?: FetchLike) {
    this.base = base.replace(/\/$/, "");
    // bind so the default implementation keeps its window receiver
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  async health(): Promise<{ status: string; checkpoint_versions: Record<string, number> }> {
    return this.request("/api/health");
  }

  async examples(split: string, offset: number, limit: number): Promise<ExampleSummary[]> {
    const q = new URLSearchParams({ split, offset: String(offset), limit: String(limit) });
    return this.request(`/api/examples?${q}`);
  }

  async predict(imageId: string): Promise<Prediction> {
    return this.request(`/api/predict/${encodeURIComponent(imageId)}`);
  }

  async regenerate(imageId: string, skeleton: string[]): Promise<Regenerated> {
    return this.request("/api/regenerate", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image_id: imageId, skeleton }),
    });
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchFn(this.base + path, init);
    } catch (err) {
      throw new ServiceDown(err);
    }
    if (!res.ok) {
      let detail: unknown = null;
      try {
        detail = (await res.json()).detail;
      } catch {
        throw new ServiceDown(`status ${res.status} with unreadable body`);
      }
      throw new RequestRejected(res.status, normalizeDetail(detail));
    }
    try {
      return (await res.json()) as T;
    } catch (err) {
      throw new ServiceDown(err);
    }
  }
}

function normalizeDetail(detail: unknown): FieldError[] {
  if (Array.isArray(detail)) {
    return detail.map((d) => ({
      field: String((d as FieldError).field ?? ""),
      message: String((d as FieldError).message ?? JSON.stringify(d)),
    }));
  }
  return [{ field: "", message: String(detail ?? "unknown error") }];
}
