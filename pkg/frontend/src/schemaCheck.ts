// Minimal JSON-Schema checker covering the subset used by the shared wire
// schema (oneOf / const / enum / type / required / properties / items /
// additionalProperties / min-maxItems). Enough to validate every outbound
// message against the same file the server validates with.

type Schema = {
  oneOf?: Schema[];
  const?: unknown;
  enum?: unknown[];
  type?: string;
  required?: string[];
  properties?: Record<string, Schema>;
  additionalProperties?: boolean;
  items?: Schema;
  minItems?: number;
  maxItems?: number;
  minimum?: number;
};

function typeOk(value: unknown, t: string): boolean {
  switch (t) {
    case "object":
      return typeof value === "object" && value !== null && !Array.isArray(value);
    case "array":
      return Array.isArray(value);
    case "string":
      return typeof value === "string";
    case "number":
      return typeof value === "number" && Number.isFinite(value);
    case "integer":
      return typeof value === "number" && Number.isInteger(value);
    case "boolean":
      return typeof value === "boolean";
    default:
      return false;
  }
}

export function validate(value: unknown, schema: Schema): boolean {
  if (schema.oneOf) {
    return schema.oneOf.filter((s) => validate(value, s)).length === 1;
  }
  if ("const" in schema && value !== schema.const) return false;
  if (schema.enum && !schema.enum.includes(value)) return false;
  if (schema.type && !typeOk(value, schema.type)) return false;
  if (schema.type === "object" || schema.properties || schema.required) {
    const obj = value as Record<string, unknown>;
    for (const key of schema.required ?? []) {
      if (!(key in obj)) return false;
    }
    for (const [key, sub] of Object.entries(schema.properties ?? {})) {
      if (key in obj && !validate(obj[key], sub)) return false;
    }
    if (schema.additionalProperties === false) {
      for (const key of Object.keys(obj)) {
        if (!(key in (schema.properties ?? {}))) return false;
      }
    }
  }
  if (schema.type === "array") {
    const arr = value as unknown[];
    if (schema.minItems !== undefined && arr.length < schema.minItems) return false;
    if (schema.maxItems !== undefined && arr.length > schema.maxItems) return false;
    if (schema.items) {
      for (const item of arr) if (!validate(item, schema.items)) return false;
    }
  }
  if (schema.minimum !== undefined && typeof value === "number" && value < schema.minimum) {
    return false;
  }
  return true;
}

export type WireSchema = {
  definitions: { client_to_server: Schema; server_to_client: Schema };
};

export function makeClientValidator(doc: WireSchema) {
  return (msg: unknown) => validate(msg, doc.definitions.client_to_server);
}
