// Typed client for the edit-job service. The UI is a pure client: every
// number and image it shows comes from these endpoints.

export type JobStatus =
  | "queued"
  | "captioning"
  | "inverting"
  | "generating"
  | "done"
  | "failed";

export const STAGE_ORDER: JobStatus[] = [
  "queued",
  "captioning",
  "inverting",
  "generating",
  "done",
];

export interface ServiceConfig {
  profile: string;
  weight_grid: number[];
  weight_min: number;
  weight_max: number;
  steps_invert: number;
  steps_generate: number;
  guidance_scale: number;
  max_upload_bytes: number;
}

export interface JobResult {
  image_id: string;
  image_url: string;
  manifest_id: string;
  weight: number;
  direction_norm?: number;
}

export interface JobView {
  job_id: string;
  status: JobStatus;
  kind: "edit" | "rerun";
  created_at: string;
  stage_timings: Record<string, number>;
  captions: { before: string[]; after: string[] } | null;
  result: JobResult | null;
  error: string | null;
  skipped_stages?: string[];
}

export interface SubmitOverrides {
  weight?: number;
  steps_invert?: number;
  steps_generate?: number;
  before_caption_override?: string;
  after_caption_override?: string;
}

export interface SubmitAccepted {
  job_id: string;
  status_url: string;
  deduplicated?: boolean;
}

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
    readonly field?: string,
  ) {
    super(message);
  }
}

type FetchLike = typeof fetch;

async function readError(response: Response): Promise<ApiError> {
  let message = `request failed (${response.status})`;
  let field: string | undefined;
  try {
    const body = (await response.json()) as { error?: string; field?: string };
    if (body.error) message = body.error;
    field = body.field;
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(message, response.status, field);
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async getConfig(): Promise<ServiceConfig> {
    const response = await this.fetchFn(this.url("/config"));
    if (!response.ok) throw await readError(response);
    return (await response.json()) as ServiceConfig;
  }

  async submitEdit(
    image: Blob,
    instruction: string,
    overrides: SubmitOverrides = {},
  ): Promise<SubmitAccepted> {
    const form = new FormData();
    form.append("image", image, "input.png");
    form.append("instruction", instruction);
    form.append("overrides", JSON.stringify(overrides));
    const response = await this.fetchFn(this.url("/edits"), {
      method: "POST",
      body: form,
    });
    if (!response.ok) throw await readError(response);
    return (await response.json()) as SubmitAccepted;
  }

  async getJob(jobId: string): Promise<JobView> {
    const response = await this.fetchFn(this.url(`/edits/${jobId}`));
    if (!response.ok) throw await readError(response);
    return (await response.json()) as JobView;
  }

  async rerun(jobId: string, weight: number): Promise<SubmitAccepted> {
    const response = await this.fetchFn(this.url(`/edits/${jobId}/rerun`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ weight }),
    });
    if (!response.ok) throw await readError(response);
    return (await response.json()) as SubmitAccepted;
  }

  imageUrl(result: JobResult): string {
    return this.url(result.image_url);
  }

  /** Poll until the job reaches done/failed; reports progress per poll. */
  async pollJob(
    jobId: string,
    onUpdate?: (view: JobView) => void,
    intervalMs = 500,
    timeoutMs = 120_000,
  ): Promise<JobView> {
    const startedAt = Date.now();
    for (;;) {
      const view = await this.getJob(jobId);
      onUpdate?.(view);
      if (view.status === "done") return view;
      if (view.status === "failed") {
        throw new ApiError(view.error ?? "job failed", 500);
      }
      if (Date.now() - startedAt > timeoutMs) {
        throw new ApiError(`job ${jobId} timed out`, 504);
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
